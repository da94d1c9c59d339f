pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod edl;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod oodgen;
pub mod optim;
pub mod par;
pub mod results;
pub mod special;
pub mod spectral;
pub mod store;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
