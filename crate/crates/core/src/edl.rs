//! Evidence, Dirichlet concentrations and subjective-logic opinions.
//!
//! Under a uniform prior (base rate `1/K`, prior weight `K`) the opinion of a
//! `K`-class Dirichlet `Dir(α)` is
//!
//! ```text
//! α_i = e_i + 1      b_i = e_i / S      u = K / S      S = Σ α_i
//! ```
//!
//! so `u + Σ b_i = 1` and the expected class probability is `α_i / S`.

use std::io::Write;

use crate::error::{Error, Result};

/// Default symmetric clamp applied to logits before exponentiation.
pub const DEFAULT_LOGIT_CLAMP: f64 = 10.0;

/// Per-class evidence; every entry is nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceVector(Vec<f64>);

impl EvidenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("evidence must be finite and nonnegative"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `e = max(0, exp(clamp(logit)) - 1)` per class.
pub fn collect_evidence(logits: &[f64], clamp: f64) -> Result<EvidenceVector> {
    if logits.len() < 2 {
        return Err(Error::validation(format!(
            "evidence needs at least two classes, got {}",
            logits.len()
        )));
    }
    if !(clamp > 0.0) {
        return Err(Error::validation("logit clamp must be positive"));
    }
    if let Some(bad) = logits.iter().find(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    Ok(EvidenceVector(logits.iter().map(|&l| evidence_of(l, clamp)).collect()))
}

#[inline]
pub(crate) fn evidence_of(logit: f64, clamp: f64) -> f64 {
    (logit.clamp(-clamp, clamp).exp() - 1.0).max(0.0)
}

/// d e / d logit: `exp(logit)` inside `(0, clamp)`, zero where the clip or
/// the clamp is active.
#[inline]
pub(crate) fn evidence_slope(logit: f64, clamp: f64) -> f64 {
    if logit > 0.0 && logit < clamp {
        logit.exp()
    } else {
        0.0
    }
}

/// A Dirichlet posterior under the uniform prior, with its opinion view.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletOpinion {
    alpha: Vec<f64>,
}

impl DirichletOpinion {
    /// Wraps a concentration vector; every `α_i` must be at least 1.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::validation("a Dirichlet opinion needs K >= 2"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 1.0) {
            return Err(Error::validation("concentrations must be finite and >= 1"));
        }
        Ok(Self { alpha })
    }

    /// Inverse of the opinion map: `α_i = b_i S + β_i w` with `S = w / u`.
    pub fn from_belief(belief: &[f64], uncertainty: f64) -> Result<Self> {
        let k = belief.len();
        if !(uncertainty > 0.0 && uncertainty <= 1.0) {
            return Err(Error::validation("uncertainty must lie in (0, 1]"));
        }
        let total: f64 = belief.iter().sum::<f64>() + uncertainty;
        if (total - 1.0).abs() > 1e-9 || belief.iter().any(|b| *b < 0.0) {
            return Err(Error::validation("belief masses and uncertainty must sum to one"));
        }
        let w = k as f64;
        let s = w / uncertainty;
        Self::from_alpha(belief.iter().map(|b| b * s + 1.0).collect())
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_sum(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Uniform base rate `1/K`.
    pub fn base_rate(&self) -> Vec<f64> {
        vec![1.0 / self.k() as f64; self.k()]
    }

    /// Prior weight `w = K`.
    pub fn prior_weight(&self) -> f64 {
        self.k() as f64
    }

    pub fn evidence(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a - 1.0).collect()
    }

    /// `b_i = (α_i - β_i w) / S`
    pub fn belief(&self) -> Vec<f64> {
        let s = self.alpha_sum();
        let w = self.prior_weight();
        self.base_rate()
            .iter()
            .zip(&self.alpha)
            .map(|(b, a)| (a - b * w) / s)
            .collect()
    }

    pub fn uncertainty(&self) -> f64 {
        uncertainty(self)
    }

    pub fn expected_probability(&self) -> Vec<f64> {
        expected_probability(self)
    }
}

/// `α = e + 1`.
pub fn to_opinion(e: &EvidenceVector) -> DirichletOpinion {
    DirichletOpinion {
        alpha: e.0.iter().map(|v| v + 1.0).collect(),
    }
}

/// Dirichlet mean `α_i / S`.
pub fn expected_probability(op: &DirichletOpinion) -> Vec<f64> {
    let s = op.alpha_sum();
    op.alpha.iter().map(|a| a / s).collect()
}

/// `u = K / S`, in `(0, 1]`.
pub fn uncertainty(op: &DirichletOpinion) -> f64 {
    op.k() as f64 / op.alpha_sum()
}

/// Writes CSV rows `alpha_1..alpha_K,u,b_1..b_K`, with a header.
pub fn write_opinion_dump<W: Write>(out: W, opinions: &[DirichletOpinion]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = opinions.first() {
        let k = first.k();
        let mut header: Vec<String> = (1..=k).map(|i| format!("alpha_{i}")).collect();
        header.push("u".into());
        header.extend((1..=k).map(|i| format!("b_{i}")));
        w.write_record(&header)?;
    }
    for op in opinions {
        let mut row: Vec<String> = op.alpha.iter().map(|a| a.to_string()).collect();
        row.push(op.uncertainty().to_string());
        row.extend(op.belief().iter().map(|b| b.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("opinion dump", e))?;
    Ok(())
}
