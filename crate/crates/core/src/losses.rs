//! Training objective: evidential cross-entropy, KL regularizer towards the
//! uniform Dirichlet, and the contrastive term against spectral negatives.
//!
//! Each term has a closed form in the concentration vector and an analytic
//! gradient; [`window_objective`] chains those through `p = α / S`,
//! `α = e + 1` and the evidence transform to give gradients with respect to
//! the raw logits.

use nalgebra::DMatrix;

use crate::edl::{evidence_of, evidence_slope};
use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma, trigamma};

/// Floor applied inside logarithms of probabilities.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance for "sums to one" checks on probability vectors.
const SIMPLEX_TOL: f64 = 1e-6;

/// Coefficients of the three terms. `ce` is 1 except in ablations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub rho1: f64,
    pub rho2: f64,
}

impl LossWeights {
    pub fn new(rho1: f64, rho2: f64) -> Self {
        Self { ce: 1.0, rho1, rho2 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.ce, self.rho1, self.rho2].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::validation("loss weights must be finite and nonnegative"))
        }
    }
}

/// The three loss terms, their weights and the combined total.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub ce_edl: f64,
    pub kl: f64,
    pub cl: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce_edl: f64, kl: f64, cl: f64, rho1: f64, rho2: f64) -> Self {
        Self::weighted(ce_edl, kl, cl, &LossWeights::new(rho1, rho2))
    }

    pub fn weighted(ce_edl: f64, kl: f64, cl: f64, w: &LossWeights) -> Self {
        Self {
            ce_edl,
            kl,
            cl,
            rho1: w.rho1,
            rho2: w.rho2,
            total: w.ce * ce_edl + w.rho1 * kl + w.rho2 * cl,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.ce_edl, self.kl, self.cl, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.len() < 2 {
        return Err(Error::validation("need at least two classes"));
    }
    if alpha.iter().any(|a| !a.is_finite() || *a < 1.0) {
        return Err(Error::validation("concentrations must be finite and >= 1"));
    }
    Ok(())
}

/// Index of the hot entry of a one-hot vector matching `alpha` in length.
pub fn one_hot_index(y: &[f64], k: usize) -> Result<usize> {
    if y.len() != k {
        return Err(Error::dims("one-hot label length", k, y.len()));
    }
    let ones: Vec<usize> = (0..k).filter(|&i| y[i] == 1.0).collect();
    if ones.len() != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::validation("label is not one-hot"));
    }
    Ok(ones[0])
}

pub fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; k];
    y[class] = 1.0;
    y
}

/// `Σ y_i (ψ(S) - ψ(α_i))`: expected negative log-likelihood of the label
/// under `Dir(α)`.
pub fn ce_edl(alpha: &[f64], y: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    let c = one_hot_index(y, alpha.len())?;
    Ok(ce_edl_at(alpha, c))
}

fn ce_edl_at(alpha: &[f64], c: usize) -> f64 {
    let s: f64 = alpha.iter().sum();
    digamma(s) - digamma(alpha[c])
}

/// ∂/∂α_j of [`ce_edl`]: `ψ₁(S) - δ_jc ψ₁(α_c)`.
pub fn ce_edl_grad(alpha: &[f64], c: usize) -> Vec<f64> {
    let s: f64 = alpha.iter().sum();
    let common = trigamma(s);
    (0..alpha.len())
        .map(|j| if j == c { common - trigamma(alpha[j]) } else { common })
        .collect()
}

/// `α̂ = y + (1 - y) ⊙ α`: the target concentration reset to 1.
pub fn adjusted_concentration(alpha: &[f64], c: usize) -> Vec<f64> {
    alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| if i == c { 1.0 } else { a })
        .collect()
}

/// `KL(Dir(α̂) ‖ Dir(1))` in closed form.
pub fn kl_to_uniform(alpha: &[f64], y: &[f64]) -> Result<f64> {
    check_alpha(alpha)?;
    let c = one_hot_index(y, alpha.len())?;
    Ok(kl_to_uniform_at(alpha, c))
}

fn kl_to_uniform_at(alpha: &[f64], c: usize) -> f64 {
    let a = adjusted_concentration(alpha, c);
    if a.iter().all(|&v| v == 1.0) {
        return 0.0;
    }
    let k = a.len() as f64;
    let s: f64 = a.iter().sum();
    let psi_s = digamma(s);
    let mut kl = ln_gamma(s) - ln_gamma(k);
    for &ai in &a {
        kl -= ln_gamma(ai);
        kl += (ai - 1.0) * (digamma(ai) - psi_s);
    }
    // exact zero at α̂ = 1; guards against rounding below zero near it
    kl.max(0.0)
}

/// ∂/∂α_j of [`kl_to_uniform`]: `(α̂_j - 1) ψ₁(α̂_j) - (Ŝ - K) ψ₁(Ŝ)` for
/// non-target `j`, zero for the target.
pub fn kl_to_uniform_grad(alpha: &[f64], c: usize) -> Vec<f64> {
    let a = adjusted_concentration(alpha, c);
    let k = a.len() as f64;
    let s: f64 = a.iter().sum();
    let common = (s - k) * trigamma(s);
    (0..a.len())
        .map(|j| {
            if j == c {
                0.0
            } else {
                (a[j] - 1.0) * trigamma(a[j]) - common
            }
        })
        .collect()
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::validation(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// `Σ p_i ln p⁻_i` with `p⁻` floored at [`PROB_FLOOR`].
pub fn contrastive(p: &[f64], p_neg: &[f64]) -> Result<f64> {
    if p.len() != p_neg.len() {
        return Err(Error::dims("contrastive probability vectors", p.len(), p_neg.len()));
    }
    check_simplex(p, "p")?;
    check_simplex(p_neg, "p_neg")?;
    Ok(contrastive_unchecked(p, p_neg))
}

fn contrastive_unchecked(p: &[f64], p_neg: &[f64]) -> f64 {
    p.iter().zip(p_neg).map(|(a, b)| a * b.max(PROB_FLOOR).ln()).sum()
}

/// Gradients of [`contrastive`] with respect to `p` and `p_neg`.
pub fn contrastive_grad(p: &[f64], p_neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gp = p_neg.iter().map(|b| b.max(PROB_FLOOR).ln()).collect();
    let gn = p
        .iter()
        .zip(p_neg)
        .map(|(a, b)| if *b > PROB_FLOOR { a / b } else { 0.0 })
        .collect();
    (gp, gn)
}

/// Pulls a gradient on `p = α / S` back to `α`.
fn prob_to_alpha(alpha: &[f64], gp: &[f64]) -> Vec<f64> {
    let s: f64 = alpha.iter().sum();
    let dot: f64 = alpha.iter().zip(gp).map(|(a, g)| a / s * g).sum();
    gp.iter().map(|g| (g - dot) / s).collect()
}

/// One batch element for [`total_loss`].
#[derive(Debug, Clone)]
pub struct LossSample {
    pub alpha: Vec<f64>,
    pub y: Vec<f64>,
    pub p: Vec<f64>,
    /// Absent when the negative branch was not built.
    pub p_neg: Option<Vec<f64>>,
}

/// Batch means of the three terms combined as `ce + ρ₁ kl + ρ₂ cl`.
pub fn total_loss(batch: &[LossSample], rho1: f64, rho2: f64) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::validation("loss batch is empty"));
    }
    if !(rho1 >= 0.0 && rho2 >= 0.0) {
        return Err(Error::validation("balancing factors must be nonnegative"));
    }
    let n = batch.len() as f64;
    let (mut ce, mut kl, mut cl) = (0.0, 0.0, 0.0);
    for s in batch {
        ce += ce_edl(&s.alpha, &s.y)?;
        kl += kl_to_uniform(&s.alpha, &s.y)?;
        match &s.p_neg {
            Some(pn) => cl += contrastive(&s.p, pn)?,
            None if rho2 > 0.0 => {
                return Err(Error::validation("contrastive weight is positive but a negative sample is missing"))
            }
            None => {}
        }
    }
    Ok(LossBreakdown::new(ce / n, kl / n, cl / n, rho1, rho2))
}

/// Loss value and logit gradients for one window.
#[derive(Debug, Clone)]
pub struct WindowObjective {
    pub breakdown: LossBreakdown,
    pub grad_logits: DMatrix<f64>,
    pub grad_neg_logits: Option<DMatrix<f64>>,
}

/// Concentrations per row of a logit matrix.
pub fn alphas_from_logits(logits: &DMatrix<f64>, clamp: f64) -> Vec<Vec<f64>> {
    logits
        .row_iter()
        .map(|r| r.iter().map(|&l| evidence_of(l, clamp) + 1.0).collect())
        .collect()
}

/// Full objective over the targets of a window, given original logits
/// (`M × K`), optional negative-branch logits for the same targets, and class
/// labels. Returns batch-mean losses and gradients with respect to both logit
/// matrices.
pub fn window_objective(
    logits: &DMatrix<f64>,
    neg_logits: Option<&DMatrix<f64>>,
    labels: &[usize],
    weights: &LossWeights,
    clamp: f64,
) -> Result<WindowObjective> {
    weights.validate()?;
    let LossWeights { ce: wce, rho1, rho2 } = *weights;
    let (m, k) = logits.shape();
    if m == 0 {
        return Err(Error::validation("loss batch is empty"));
    }
    if labels.len() != m {
        return Err(Error::dims("labels per logit row", m, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(Error::Index {
            context: "class label",
            index: bad,
            size: k,
        });
    }
    if let Some(nl) = neg_logits {
        if nl.shape() != logits.shape() {
            return Err(Error::dims("negative logits", format!("{:?}", logits.shape()), format!("{:?}", nl.shape())));
        }
    }
    if rho2 > 0.0 && neg_logits.is_none() {
        return Err(Error::validation("contrastive weight is positive but no negative logits were given"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }

    let alphas = alphas_from_logits(logits, clamp);
    let neg_alphas = neg_logits.map(|nl| alphas_from_logits(nl, clamp));
    let inv_m = 1.0 / m as f64;
    let mut g = DMatrix::zeros(m, k);
    let mut gn = neg_logits.map(|_| DMatrix::zeros(m, k));
    let (mut ce, mut kl, mut cl) = (0.0, 0.0, 0.0);

    for (row, (alpha, &c)) in alphas.iter().zip(labels).enumerate() {
        ce += ce_edl_at(alpha, c);
        kl += kl_to_uniform_at(alpha, c);
        let mut ga: Vec<f64> = ce_edl_grad(alpha, c).into_iter().map(|v| wce * v).collect();
        for (x, y) in ga.iter_mut().zip(kl_to_uniform_grad(alpha, c)) {
            *x += rho1 * y;
        }
        if let (Some(na), Some(gn)) = (&neg_alphas, gn.as_mut()) {
            let a_neg = &na[row];
            let (s, sn) = (alpha.iter().sum::<f64>(), a_neg.iter().sum::<f64>());
            let p: Vec<f64> = alpha.iter().map(|a| a / s).collect();
            let pn: Vec<f64> = a_neg.iter().map(|a| a / sn).collect();
            cl += contrastive_unchecked(&p, &pn);
            let (gp, gpn) = contrastive_grad(&p, &pn);
            for (x, y) in ga.iter_mut().zip(prob_to_alpha(alpha, &gp)) {
                *x += rho2 * y;
            }
            let gan = prob_to_alpha(a_neg, &gpn);
            let nl = neg_logits.expect("present with neg_alphas");
            for j in 0..k {
                gn[(row, j)] = rho2 * gan[j] * evidence_slope(nl[(row, j)], clamp) * inv_m;
            }
        }
        for j in 0..k {
            g[(row, j)] = ga[j] * evidence_slope(logits[(row, j)], clamp) * inv_m;
        }
    }
    let cl_mean = if neg_logits.is_some() { cl * inv_m } else { 0.0 };
    Ok(WindowObjective {
        breakdown: LossBreakdown::weighted(ce * inv_m, kl * inv_m, cl_mean, weights),
        grad_logits: g,
        grad_neg_logits: gn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ce_edl_examples() {
        assert_abs_diff_eq!(ce_edl(&[2.0, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap(), 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ce_edl(&[1.0, 1.0, 1.0], &[0.0, 1.0, 0.0]).unwrap(), 1.5, epsilon = 1e-12);
        let big = ce_edl(&[1e9, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(big > 0.0 && big < 1e-8);
    }

    #[test]
    fn ce_edl_rejects_bad_labels() {
        assert!(ce_edl(&[2.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(ce_edl(&[2.0, 1.0], &[0.5, 0.5]).is_err());
        assert!(ce_edl(&[2.0, 1.0], &[1.0]).is_err());
        assert!(ce_edl(&[0.5, 1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_uniform(&[5.0, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            kl_to_uniform(&[1.0, 2.0, 1.0], &[1.0, 0.0, 0.0]).unwrap(),
            3f64.ln() - 5.0 / 6.0,
            epsilon = 1e-12
        );
        for c in 0..3 {
            assert_eq!(kl_to_uniform(&[1.0; 3], &one_hot(c, 3)).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_ignores_target_concentration() {
        let y = one_hot(1, 4);
        let a = kl_to_uniform(&[2.0, 1.0, 3.5, 1.2], &y).unwrap();
        let b = kl_to_uniform(&[2.0, 900.0, 3.5, 1.2], &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn contrastive_examples() {
        let u = [1.0 / 3.0; 3];
        assert_abs_diff_eq!(contrastive(&[0.5, 0.25, 0.25], &u).unwrap(), (1.0f64 / 3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            contrastive(&[0.5, 0.5], &[0.9, 0.1]).unwrap(),
            0.5 * (0.9f64.ln() + 0.1f64.ln()),
            epsilon = 1e-12
        );
        let eps = 1e-9;
        let p = [1.0 - eps, eps];
        let v = contrastive(&p, &p).unwrap();
        assert!(v < 0.0 && v > -1e-7);
        assert!(contrastive(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(contrastive(&[0.5, 0.5], &[1.0 / 3.0; 3]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let s = LossSample {
            alpha: vec![3.0, 1.5, 1.0],
            y: one_hot(0, 3),
            p: vec![0.5, 0.3, 0.2],
            p_neg: Some(vec![0.2, 0.3, 0.5]),
        };
        let only_ce = total_loss(std::slice::from_ref(&s), 0.0, 0.0).unwrap();
        assert_eq!(only_ce.total, only_ce.ce_edl);

        let one = total_loss(std::slice::from_ref(&s), 0.6, 0.8).unwrap();
        let expected = ce_edl(&s.alpha, &s.y).unwrap()
            + 0.6 * kl_to_uniform(&s.alpha, &s.y).unwrap()
            + 0.8 * contrastive(&s.p, s.p_neg.as_ref().unwrap()).unwrap();
        assert_abs_diff_eq!(one.total, expected, epsilon = 1e-12);

        let two = total_loss(&[s.clone(), s.clone()], 0.6, 0.8).unwrap();
        assert_abs_diff_eq!(two.total, one.total, epsilon = 1e-15);

        assert!(total_loss(&[], 0.6, 0.8).is_err());
        let no_neg = LossSample { p_neg: None, ..s };
        assert!(total_loss(std::slice::from_ref(&no_neg), 0.6, 0.8).is_err());
        assert!(total_loss(&[no_neg], 0.6, 0.0).is_ok());
    }

    #[test]
    fn ce_edl_strictly_decreasing_in_target_evidence() {
        let mut prev = f64::INFINITY;
        for e in [0.0, 0.5, 1.0, 3.0, 10.0, 100.0] {
            let v = ce_edl(&[1.0 + e, 2.0, 1.3], &one_hot(0, 3)).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let (mut a, mut b) = (x.to_vec(), x.to_vec());
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        num / den.max(1e-12)
    }

    #[test]
    fn alpha_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let k = rng.random_range(2..6);
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(1.05..20.0)).collect();
            let c = rng.random_range(0..k);
            let g = ce_edl_grad(&alpha, c);
            assert!(rel(&g, &fd(|a| ce_edl_at(a, c), &alpha, 1e-5)) < 1e-7);
            let g = kl_to_uniform_grad(&alpha, c);
            assert!(rel(&g, &fd(|a| kl_to_uniform_at(a, c), &alpha, 1e-5)) < 1e-6);
        }
    }

    #[test]
    fn window_objective_matches_total_loss() {
        let logits = DMatrix::from_row_slice(2, 3, &[1.2, -0.4, 0.3, 0.1, 2.0, -1.0]);
        let neg = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.7, -0.5, 0.9, 0.05]);
        let labels = [0, 1];
        let obj = window_objective(&logits, Some(&neg), &labels, &LossWeights::new(0.6, 0.8), 10.0).unwrap();
        let alphas = alphas_from_logits(&logits, 10.0);
        let nalphas = alphas_from_logits(&neg, 10.0);
        let batch: Vec<LossSample> = (0..2)
            .map(|i| {
                let s: f64 = alphas[i].iter().sum();
                let sn: f64 = nalphas[i].iter().sum();
                LossSample {
                    alpha: alphas[i].clone(),
                    y: one_hot(labels[i], 3),
                    p: alphas[i].iter().map(|a| a / s).collect(),
                    p_neg: Some(nalphas[i].iter().map(|a| a / sn).collect()),
                }
            })
            .collect();
        let expected = total_loss(&batch, 0.6, 0.8).unwrap();
        assert_abs_diff_eq!(obj.breakdown.total, expected.total, epsilon = 1e-12);
        assert_abs_diff_eq!(obj.breakdown.cl, expected.cl, epsilon = 1e-12);
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut done = 0;
        while done < 20 {
            let (m, k) = (rng.random_range(1..5), rng.random_range(2..6));
            // keep logits away from the clip kinks at 0 and 10
            let draw = |rng: &mut ChaCha8Rng| {
                DMatrix::from_fn(m, k, |_, _| {
                    let v: f64 = rng.random_range(0.05..3.0);
                    if rng.random_bool(0.3) { -v } else { v }
                })
            };
            let (logits, neg) = (draw(&mut rng), draw(&mut rng));
            let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            let w = LossWeights {
                ce: [0.0, 1.0][done % 2],
                rho1: rng.random_range(0.0..1.0),
                rho2: rng.random_range(0.0..1.0),
            };
            let obj = window_objective(&logits, Some(&neg), &labels, &w, 10.0).unwrap();
            let f = |l: &DMatrix<f64>, n: &DMatrix<f64>| window_objective(l, Some(n), &labels, &w, 10.0).unwrap().breakdown.total;
            let h = 1e-6;
            let mut num = DMatrix::zeros(m, k);
            let mut num_neg = DMatrix::zeros(m, k);
            for e in 0..m * k {
                let (mut up, mut dn) = (logits.clone(), logits.clone());
                up[e] += h;
                dn[e] -= h;
                num[e] = (f(&up, &neg) - f(&dn, &neg)) / (2.0 * h);
                let (mut up, mut dn) = (neg.clone(), neg.clone());
                up[e] += h;
                dn[e] -= h;
                num_neg[e] = (f(&logits, &up) - f(&logits, &dn)) / (2.0 * h);
            }
            let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / a.norm().max(b.norm()).max(1e-10);
            assert!(rel(&obj.grad_logits, &num) < 1e-6);
            assert!(rel(obj.grad_neg_logits.as_ref().unwrap(), &num_neg) < 1e-6);
            done += 1;
        }
    }
}
