//! Normalized Laplacian spectra and spectrum-aware negative samples.
//!
//! For `L = U Λ Uᵀ` with ascending eigenvalues, a negative sample keeps the
//! first `⌊rN/2⌋` low-frequency eigenspaces and every high-frequency one
//! (indices `⌊N/2⌋ + 1 ..= N`):
//!
//! ```text
//! L⁻_r = Σ_{i ≤ ⌊rN/2⌋} u_i u_iᵀ + Σ_{j > ⌊N/2⌋} u_j u_jᵀ
//! ```
//!
//! The encoder then propagates with `P⁻ = I − L⁻_r` in place of the
//! snapshot's normalized adjacency.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{normalize_propagation, GraphSnapshot, Propagator, SnapshotWindow};
use crate::par::{self, Execution};

/// Symmetry tolerance accepted by [`eigendecompose`].
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues closer than this are treated as tied when ordering.
const TIE_TOL: f64 = 1e-10;
/// Node count above which only the low half of the spectrum is computed.
pub const DEFAULT_LARGE_N_THRESHOLD: usize = 2000;

/// `L = I − D̃^{-1/2} Ã D̃^{-1/2}` as a dense matrix.
pub fn laplacian(snap: &GraphSnapshot) -> DMatrix<f64> {
    let p = normalize_propagation(snap);
    let n = p.dim();
    let mut l = DMatrix::identity(n, n);
    for i in 0..n {
        for (j, v) in p.row(i) {
            l[(i, j)] -= v;
        }
    }
    l
}

/// Ascending eigenvalues with matching orthonormal eigenvectors (as columns).
///
/// When built by the truncated path only the lowest `⌊N/2⌋` pairs are
/// present; see [`SpectralDecomposition::is_truncated`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    n: usize,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    /// The decomposed matrix; kept for the weighted high-frequency term of a
    /// truncated decomposition.
    laplacian: Option<DMatrix<f64>>,
}

impl SpectralDecomposition {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvectors as columns, in eigenvalue order.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn is_truncated(&self) -> bool {
        self.eigenvalues.len() < self.n
    }

    /// `Σ λ_i u_i u_iᵀ` over the stored pairs.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let u = &self.eigenvectors;
        let scaled = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * self.eigenvalues[j]);
        scaled * u.transpose()
    }

    /// `Σ_{i ∈ idx} w_i u_i u_iᵀ`
    fn projector(&self, idx: std::ops::Range<usize>, weighted: bool) -> DMatrix<f64> {
        let cols = self.eigenvectors.columns(idx.start, idx.len());
        if weighted {
            let lam = &self.eigenvalues[idx];
            let scaled = DMatrix::from_fn(cols.nrows(), cols.ncols(), |i, j| cols[(i, j)] * lam[j]);
            scaled * cols.transpose()
        } else {
            &cols * cols.transpose()
        }
    }
}

fn check_symmetric(l: &DMatrix<f64>) -> Result<()> {
    if !l.is_square() {
        return Err(Error::dims("laplacian", "square", format!("{:?}", l.shape())));
    }
    let n = l.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (l[(i, j)] - l[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::validation(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    l[(i, j)],
                    l[(j, i)]
                )));
            }
        }
    }
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    Ok(())
}

fn argmax_abs(v: nalgebra::DVectorView<'_, f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

/// Sorts pairs by eigenvalue, breaking ties (within [`TIE_TOL`]) by the row
/// of each vector's largest-magnitude entry, and makes every vector's first
/// nonzero entry positive.
fn canonicalize(values: &[f64], vectors: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let m = values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    // group runs of tied eigenvalues, then order each run by argmax row
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && values[order[end]] - values[order[end - 1]] <= TIE_TOL {
            end += 1;
        }
        order[start..end].sort_by_key(|&c| (argmax_abs(vectors.column(c)), c));
        start = end;
    }
    let n = vectors.nrows();
    let mut out = DMatrix::zeros(n, m);
    for (dst, &src) in order.iter().enumerate() {
        let col = vectors.column(src);
        let sign = col
            .iter()
            .find(|x| x.abs() > 1e-10)
            .map_or(1.0, |x| x.signum());
        out.set_column(dst, &(col * sign));
    }
    (order.iter().map(|&i| values[i]).collect(), out)
}

/// Full symmetric eigendecomposition.
pub fn eigendecompose(l: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    check_symmetric(l)?;
    let eig = l.clone().symmetric_eigen();
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let (eigenvalues, eigenvectors) = canonicalize(&values, &eig.eigenvectors);
    Ok(SpectralDecomposition {
        n: l.nrows(),
        eigenvalues,
        eigenvectors,
        laplacian: None,
    })
}

/// Lowest `⌊N/2⌋` eigenpairs by block subspace iteration on `2I − L`
/// with Rayleigh–Ritz extraction. Falls back to the full solver when the
/// residual does not reach `tol` within `max_iter` sweeps.
pub fn eigendecompose_low_half(l: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<SpectralDecomposition> {
    check_symmetric(l)?;
    let n = l.nrows();
    let h = n / 2;
    if h == 0 {
        return eigendecompose(l);
    }
    let block = (h + (h / 5).max(8)).min(n);
    let shifted = DMatrix::identity(n, n) * 2.0 - l;
    // deterministic start: identity columns mixed by a fixed cosine pattern
    let mut q = DMatrix::from_fn(n, block, |i, j| {
        ((i as f64 + 1.0) * (j as f64 + 1.0) * 0.7071).cos() + if i == j { 1.0 } else { 0.0 }
    });
    q = q.qr().q();
    for _ in 0..max_iter {
        q = (&shifted * &q).qr().q();
        // Rayleigh–Ritz on span(q)
        let small = q.transpose() * l * &q;
        let small = (&small + small.transpose()) * 0.5;
        let eig = small.symmetric_eigen();
        let ritz = &q * &eig.eigenvectors;
        let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        let (vals, vecs) = canonicalize(&values, &ritz);
        let low_vecs = vecs.columns(0, h).into_owned();
        let low_vals = vals[..h].to_vec();
        let resid = l * &low_vecs
            - DMatrix::from_fn(n, h, |i, j| low_vecs[(i, j)] * low_vals[j]);
        let worst = resid.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        if worst < tol {
            return Ok(SpectralDecomposition {
                n,
                eigenvalues: low_vals,
                eigenvectors: low_vecs,
                laplacian: Some(l.clone()),
            });
        }
        q = vecs;
    }
    log::warn!("truncated eigensolver did not converge for N={n}; using the full decomposition");
    eigendecompose(l)
}

/// How kept eigenspaces enter the negative sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Unit coefficient on every kept projector.
    #[default]
    Verbatim,
    /// Each kept projector scaled by its eigenvalue.
    Weighted,
}

/// A spectrum-perturbed Laplacian and the propagation operator derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSample {
    pub ratio: f64,
    pub mode: AugmentMode,
    pub laplacian: DMatrix<f64>,
    pub propagation: DMatrix<f64>,
}

/// Number of low-frequency eigenspaces kept for ratio `r`: `⌊rN/2⌋`.
pub fn kept_low_count(n: usize, r: f64) -> usize {
    (r * n as f64 / 2.0).floor() as usize
}

/// Builds `L⁻_r` from a decomposition.
pub fn augment(dec: &SpectralDecomposition, r: f64, mode: AugmentMode) -> Result<NegativeSample> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::validation(format!("preservation ratio {r} outside [0, 1)")));
    }
    let lneg = negative_laplacian(dec, kept_low_count(dec.n, r), mode)?;
    let propagation = DMatrix::identity(dec.n, dec.n) - &lneg;
    Ok(NegativeSample {
        ratio: r,
        mode,
        laplacian: lneg,
        propagation,
    })
}

/// `Σ_{i < keep} u_i u_iᵀ + Σ_{j ≥ ⌊N/2⌋} u_j u_jᵀ` (0-based), optionally
/// eigenvalue-weighted.
pub fn negative_laplacian(dec: &SpectralDecomposition, keep: usize, mode: AugmentMode) -> Result<DMatrix<f64>> {
    let n = dec.n;
    let half = n / 2;
    if keep > half {
        return Err(Error::validation(format!("cannot keep {keep} of {half} low-frequency eigenspaces")));
    }
    let weighted = mode == AugmentMode::Weighted;
    let low_kept = dec.projector(0..keep, weighted);
    let high = if dec.is_truncated() {
        // high half = complement of the stored low half
        let low_all = dec.projector(0..half, weighted);
        let base = if weighted {
            dec.laplacian.clone().ok_or_else(|| Error::validation("truncated decomposition lacks its matrix"))?
        } else {
            DMatrix::identity(n, n)
        };
        base - low_all
    } else {
        dec.projector(half..n, weighted)
    };
    Ok(low_kept + high)
}

/// Decompositions keyed by snapshot structure, shared across threads.
#[derive(Debug)]
pub struct SpectralCache {
    entries: RwLock<HashMap<[u8; 32], Arc<SpectralDecomposition>>>,
    computed: AtomicUsize,
    large_n_threshold: usize,
}

impl Default for SpectralCache {
    fn default() -> Self {
        Self::new(DEFAULT_LARGE_N_THRESHOLD)
    }
}

impl SpectralCache {
    pub fn new(large_n_threshold: usize) -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            computed: AtomicUsize::new(0),
            large_n_threshold,
        }
    }

    /// Number of decompositions actually computed (cache misses).
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn get_or_compute(&self, snap: &GraphSnapshot) -> Result<Arc<SpectralDecomposition>> {
        let key = snap.structure_hash();
        if let Some(hit) = self.entries.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let l = laplacian(snap);
        let dec = if snap.num_nodes() > self.large_n_threshold {
            eigendecompose_low_half(&l, 1e-8, 300)?
        } else {
            eigendecompose(&l)?
        };
        self.computed.fetch_add(1, Ordering::Relaxed);
        let dec = Arc::new(dec);
        let mut w = self.entries.write().expect("cache lock");
        Ok(Arc::clone(w.entry(key).or_insert(dec)))
    }
}

/// Spectral negatives for every snapshot of a window: one `P⁻` per timestep,
/// features untouched.
pub fn negative_window(
    window: &SnapshotWindow<'_>,
    r: f64,
    mode: AugmentMode,
    cache: &SpectralCache,
    exec: Execution,
) -> Result<Vec<Propagator>> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::validation(format!("preservation ratio {r} outside [0, 1)")));
    }
    par::try_map_slice(exec, window.snapshots(), |snap| {
        let dec = cache.get_or_compute(snap)?;
        let neg = augment(&dec, r, mode)?;
        Ok(Propagator::from(neg.propagation))
    })
}

/// Writes `timestep,index,eigenvalue` rows.
pub fn write_spectrum_csv<W: Write>(out: W, spectra: &[(usize, &SpectralDecomposition)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestep", "index", "eigenvalue"])?;
    for (t, dec) in spectra {
        for (i, lam) in dec.eigenvalues().iter().enumerate() {
            w.write_record([t.to_string(), i.to_string(), lam.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("spectrum dump", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{window, DynamicGraphSequence};
    use approx::assert_abs_diff_eq;

    fn snap(n: usize, edges: &[(usize, usize)]) -> GraphSnapshot {
        GraphSnapshot::new(0, n, edges.iter().copied(), DMatrix::zeros(n, 1), None).unwrap()
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn k3() -> GraphSnapshot {
        snap(3, &[(0, 1), (1, 2), (0, 2)])
    }

    #[test]
    fn laplacian_examples() {
        assert_eq!(laplacian(&snap(1, &[])), DMatrix::from_element(1, 1, 0.0));
        let l = laplacian(&snap(2, &[(0, 1)]));
        let want = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!(max_abs(&(l - want)) < 1e-15);
        let l = laplacian(&k3());
        let want = DMatrix::identity(3, 3) - DMatrix::from_element(3, 3, 1.0 / 3.0);
        assert!(max_abs(&(l - want)) < 1e-15);
    }

    #[test]
    fn two_node_spectrum() {
        let dec = eigendecompose(&laplacian(&snap(2, &[(0, 1)]))).unwrap();
        assert_abs_diff_eq!(dec.eigenvalues()[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(dec.eigenvalues()[1], 1.0, epsilon = 1e-14);
        let s = 1.0 / 2f64.sqrt();
        let u = dec.eigenvectors();
        assert_abs_diff_eq!(u[(0, 0)], s, epsilon = 1e-14);
        assert_abs_diff_eq!(u[(1, 0)], s, epsilon = 1e-14);
        assert_abs_diff_eq!(u[(0, 1)], s, epsilon = 1e-14);
        assert_abs_diff_eq!(u[(1, 1)], -s, epsilon = 1e-14);
    }

    #[test]
    fn single_node_spectrum() {
        let dec = eigendecompose(&DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(dec.eigenvalues(), &[0.0]);
        assert_eq!(dec.eigenvectors()[(0, 0)], 1.0);
    }

    #[test]
    fn degenerate_eigenspace_projector() {
        let dec = eigendecompose(&laplacian(&k3())).unwrap();
        let p = dec.projector(1..3, false);
        let want = DMatrix::identity(3, 3) - DMatrix::from_element(3, 3, 1.0 / 3.0);
        assert!(max_abs(&(p - want)) < 1e-12);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(eigendecompose(&m).is_err());
    }

    #[test]
    fn augment_examples() {
        let dec = eigendecompose(&laplacian(&snap(2, &[(0, 1)]))).unwrap();
        let neg = augment(&dec, 0.0, AugmentMode::Verbatim).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!(max_abs(&(&neg.laplacian - want)) < 1e-14);

        let dec = eigendecompose(&laplacian(&k3())).unwrap();
        let neg = augment(&dec, 0.8, AugmentMode::Verbatim).unwrap();
        assert!(max_abs(&(&neg.laplacian - DMatrix::identity(3, 3))) < 1e-10);
        assert!(max_abs(&neg.propagation) < 1e-10);

        assert!(augment(&dec, 1.0, AugmentMode::Verbatim).is_err());
        assert!(augment(&dec, -0.1, AugmentMode::Verbatim).is_err());
    }

    #[test]
    fn keeping_every_low_eigenspace_gives_identity() {
        // 4-cycle plus chord: simple spectrum, N even
        let s = snap(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]);
        let dec = eigendecompose(&laplacian(&s)).unwrap();
        let full = negative_laplacian(&dec, 2, AugmentMode::Verbatim).unwrap();
        assert!(max_abs(&(full - DMatrix::identity(4, 4))) < 1e-12);
        // r just below 1 drops exactly the last low eigenspace
        let near = augment(&dec, 0.99, AugmentMode::Verbatim).unwrap();
        let dropped = dec.projector(1..2, false);
        assert!(max_abs(&(DMatrix::identity(4, 4) - &near.laplacian - dropped)) < 1e-12);
    }

    #[test]
    fn weighted_mode_with_all_terms_reconstructs_l() {
        let s = snap(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)]);
        let l = laplacian(&s);
        let dec = eigendecompose(&l).unwrap();
        let w = negative_laplacian(&dec, 2, AugmentMode::Weighted).unwrap();
        assert!(max_abs(&(w - l)) < 1e-12);
    }

    #[test]
    fn truncated_path_matches_full() {
        // ring with chords: N = 12
        let mut edges: Vec<(usize, usize)> = (0..12).map(|i| (i, (i + 1) % 12)).collect();
        edges.extend([(0, 5), (3, 9), (2, 7)]);
        let l = laplacian(&snap(12, &edges));
        let full = eigendecompose(&l).unwrap();
        let low = eigendecompose_low_half(&l, 1e-11, 5000).unwrap();
        assert!(low.is_truncated());
        for mode in [AugmentMode::Verbatim, AugmentMode::Weighted] {
            for r in [0.0, 0.3, 0.6] {
                let a = augment(&full, r, mode).unwrap();
                let b = augment(&low, r, mode).unwrap();
                assert!(max_abs(&(a.laplacian - b.laplacian)) < 1e-8, "{mode:?} r={r}");
            }
        }
    }

    #[test]
    fn window_negatives_are_cached_per_snapshot() {
        let snaps: Vec<_> = (0..3)
            .map(|t| {
                let edges: Vec<_> = (0..t + 2).map(|i| (i, i + 1)).collect();
                GraphSnapshot::new(t, 6, edges, DMatrix::zeros(6, 1), None).unwrap()
            })
            .collect();
        let seq = DynamicGraphSequence::new(snaps, 2, None).unwrap();
        let w = window(&seq, 0, 3).unwrap();
        let cache = SpectralCache::default();
        let negs = negative_window(&w, 0.3, AugmentMode::Verbatim, &cache, Execution::Parallel).unwrap();
        assert_eq!(negs.len(), 3);
        assert_eq!(cache.computed(), 3);
        negative_window(&w, 0.5, AugmentMode::Verbatim, &cache, Execution::Sequential).unwrap();
        assert_eq!(cache.computed(), 3);
    }

    #[test]
    fn identical_snapshots_give_identical_negatives() {
        let snaps: Vec<_> = (0..2)
            .map(|t| GraphSnapshot::new(t, 4, [(0, 1), (1, 2), (2, 3)], DMatrix::zeros(4, 1), None).unwrap())
            .collect();
        let seq = DynamicGraphSequence::new(snaps, 2, None).unwrap();
        let w = window(&seq, 0, 2).unwrap();
        let cache = SpectralCache::default();
        let negs = negative_window(&w, 0.3, AugmentMode::Verbatim, &cache, Execution::Sequential).unwrap();
        assert_eq!(negs[0].to_dense(), negs[1].to_dense());
        assert_eq!(cache.computed(), 1);
    }

    #[test]
    fn spectrum_dump() {
        let dec = eigendecompose(&laplacian(&snap(1, &[]))).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &[(4, &dec)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "timestep,index,eigenvalue\n4,0,0\n");
    }
}
