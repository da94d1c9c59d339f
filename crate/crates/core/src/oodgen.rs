//! Synthetic out-of-distribution snapshots.
//!
//! * Structure manipulation (SM) resamples every edge from a stochastic block
//!   model whose density is calibrated to the original snapshot.
//! * Feature interpolation (FI) mixes each node's features with those of a
//!   randomly paired node.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DynamicGraphSequence, GraphSnapshot, Provenance};
use crate::par::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SbmProbabilities {
    /// `p_out = ratio · p_in`, `p_in` chosen so the expected edge count
    /// equals the input snapshot's.
    Calibrated { ratio: f64 },
    Fixed { p_in: f64, p_out: f64 },
}

impl Default for SbmProbabilities {
    fn default() -> Self {
        SbmProbabilities::Calibrated { ratio: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub num_blocks: usize,
    /// Per-node block probabilities; `None` splits nodes into equal
    /// contiguous blocks.
    #[serde(default)]
    pub block_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub probabilities: SbmProbabilities,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            block_probs: None,
            probabilities: SbmProbabilities::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum LambdaDist {
    /// `λ_i ~ U[0, 1]` independently per node.
    #[default]
    Uniform,
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FiSpec {
    #[serde(default)]
    pub lambda: LambdaDist,
    #[serde(default)]
    pub seed: u64,
    /// Explicit partner map `π`; drawn as a seeded shuffle when absent.
    #[serde(default)]
    pub permutation: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OodKind {
    Sm(SbmSpec),
    Fi(FiSpec),
}

impl OodKind {
    pub fn provenance(&self) -> Provenance {
        match self {
            OodKind::Sm(_) => Provenance::Sm,
            OodKind::Fi(_) => Provenance::Fi,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            OodKind::Sm(s) => s.seed,
            OodKind::Fi(s) => s.seed,
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        match self {
            OodKind::Sm(s) => OodKind::Sm(SbmSpec { seed, ..s.clone() }),
            OodKind::Fi(s) => OodKind::Fi(FiSpec { seed, ..s.clone() }),
        }
    }
}

fn assign_blocks(n: usize, spec: &SbmSpec, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let b = spec.num_blocks;
    if b < 2 {
        return Err(Error::validation(format!("block model needs at least 2 blocks, got {b}")));
    }
    match &spec.block_probs {
        None => Ok((0..n).map(|i| i * b / n.max(1)).collect()),
        Some(p) => {
            if p.len() != b {
                return Err(Error::dims("block probabilities", b, p.len()));
            }
            let dist = WeightedIndex::new(p).map_err(|e| Error::validation(format!("block probabilities: {e}")))?;
            Ok((0..n).map(|_| dist.sample(rng)).collect())
        }
    }
}

/// Number of intra-block and inter-block node pairs.
fn pair_counts(blocks: &[usize], num_blocks: usize) -> (f64, f64) {
    let mut sizes = vec![0f64; num_blocks];
    for &b in blocks {
        sizes[b] += 1.0;
    }
    let n = blocks.len() as f64;
    let intra: f64 = sizes.iter().map(|s| s * (s - 1.0) / 2.0).sum();
    (intra, n * (n - 1.0) / 2.0 - intra)
}

/// `(p_in, p_out)` for a snapshot with `edges` edges.
pub fn calibrate(blocks: &[usize], num_blocks: usize, edges: usize, ratio: f64) -> Result<(f64, f64)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::validation(format!("p_out/p_in ratio {ratio} outside [0, 1)")));
    }
    let (intra, inter) = pair_counts(blocks, num_blocks);
    let capacity = intra + ratio * inter;
    if edges == 0 {
        return Ok((0.0, 0.0));
    }
    let p_in = edges as f64 / capacity;
    if !(p_in <= 1.0) {
        return Err(Error::validation(format!(
            "cannot calibrate block model to {edges} edges: needs p_in = {p_in:.4} > 1"
        )));
    }
    Ok((p_in, ratio * p_in))
}

/// Replaces the edges of `snap` with a block-model draw.
pub fn sm_generate(snap: &GraphSnapshot, spec: &SbmSpec) -> Result<GraphSnapshot> {
    let n = snap.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blocks = assign_blocks(n, spec, &mut rng)?;
    let (p_in, p_out) = match spec.probabilities {
        SbmProbabilities::Calibrated { ratio } => calibrate(&blocks, spec.num_blocks, snap.edges().len(), ratio)?,
        SbmProbabilities::Fixed { p_in, p_out } => {
            if !(0.0 <= p_out && p_out <= p_in && p_in <= 1.0) {
                return Err(Error::validation(format!(
                    "block probabilities need 0 ≤ p_out ≤ p_in ≤ 1, got p_in={p_in} p_out={p_out}"
                )));
            }
            (p_in, p_out)
        }
    };
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let p = if blocks[a] == blocks[b] { p_in } else { p_out };
            if rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    snap.with_edges(edges)
}

/// `x'_i = λ_i x_i + (1 − λ_i) x_{π(i)}`.
pub fn fi_generate(snap: &GraphSnapshot, spec: &FiSpec) -> Result<GraphSnapshot> {
    let n = snap.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let perm = match &spec.permutation {
        Some(p) => {
            let mut seen = vec![false; n];
            if p.len() != n || p.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
                return Err(Error::validation("partner map is not a permutation of the nodes"));
            }
            p.clone()
        }
        None => {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        }
    };
    let lambdas: Vec<f64> = match spec.lambda {
        LambdaDist::Uniform => (0..n).map(|_| rng.random_range(0.0..=1.0)).collect(),
        LambdaDist::Constant { value } => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::validation(format!("interpolation coefficient {value} outside [0, 1]")));
            }
            vec![value; n]
        }
    };
    let x = snap.features();
    let mixed = DMatrix::from_fn(n, x.ncols(), |i, j| {
        let l = lambdas[i];
        if l == 1.0 {
            x[(i, j)]
        } else {
            l * x[(i, j)] + (1.0 - l) * x[(perm[i], j)]
        }
    });
    snap.with_features(mixed)
}

/// Seed used for the snapshot at `timestep`.
pub fn snapshot_seed(master: u64, timestep: usize) -> u64 {
    master.wrapping_add(timestep as u64)
}

/// Applies one generator to every snapshot, each with its own derived seed.
pub fn make_ood_testset(seq: &DynamicGraphSequence, kind: &OodKind, exec: Execution) -> Result<DynamicGraphSequence> {
    seq.map_snapshots(kind.provenance(), exec, |snap| {
        match kind.with_seed(snapshot_seed(kind.seed(), snap.timestep())) {
            OodKind::Sm(s) => sm_generate(snap, &s),
            OodKind::Fi(s) => fi_generate(snap, &s),
        }
    })
}
