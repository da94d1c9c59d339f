//! Two-community dynamic stochastic block model with community-correlated
//! node labels and slowly drifting Gaussian features.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicGraphSequence, GraphSnapshot, Labels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub timesteps: usize,
    pub feature_dim: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Class means are `±mean_scale · 1`.
    pub mean_scale: f64,
    /// Shared per-timestep shift of every feature.
    pub drift: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_nodes: 60,
            timesteps: 12,
            feature_dim: 8,
            p_in: 0.2,
            p_out: 0.02,
            mean_scale: 0.5,
            drift: 0.01,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Community (and label) of node `i`: alternating, so any contiguous block
/// of nodes holds both classes.
pub fn community(i: usize) -> usize {
    i % 2
}

pub fn generate(spec: &SyntheticSpec) -> Result<DynamicGraphSequence> {
    if spec.num_nodes < 2 || spec.timesteps == 0 || spec.feature_dim == 0 {
        return Err(Error::validation("synthetic graph needs ≥ 2 nodes, ≥ 1 timestep and ≥ 1 feature"));
    }
    for p in [spec.p_in, spec.p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_nodes;
    let labels = Labels::Node((0..n).map(|i| Some(community(i))).collect());
    let mut snapshots = Vec::with_capacity(spec.timesteps);
    for t in 0..spec.timesteps {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let p = if community(a) == community(b) { spec.p_in } else { spec.p_out };
                if rng.random_bool(p) {
                    edges.push((a, b));
                }
            }
        }
        let shift = spec.drift * t as f64;
        let x = DMatrix::from_fn(n, spec.feature_dim, |i, _| {
            let sign = if community(i) == 1 { 1.0 } else { -1.0 };
            sign * spec.mean_scale + shift + noise.sample(&mut rng)
        });
        snapshots.push(GraphSnapshot::new(t, n, edges, x, Some(labels.clone()))?);
    }
    DynamicGraphSequence::new(snapshots, 2, None)
}
