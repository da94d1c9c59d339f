//! Window scores, thresholding, and detection / classification metrics.
//!
//! OOD is the positive class throughout: higher scores mean "more OOD".

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Collapses per-target scores into one window score.
pub fn aggregate_window_score(scores: &[f64], mode: Aggregation) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::validation("cannot aggregate an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite target score".into()));
    }
    Ok(match mode {
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub score: f64,
    pub threshold: f64,
    pub flag: bool,
}

/// Flags `score ≥ threshold`.
pub fn detect(score: f64, threshold: f64) -> DetectionResult {
    DetectionResult {
        score,
        threshold,
        flag: score >= threshold,
    }
}

fn check_inputs(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::validation(format!(
            "detection metrics need both classes (got {} ID, {} OOD scores)",
            id.len(),
            ood.len()
        )));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN detection score".into()));
    }
    Ok(())
}

/// One operating point per distinct score, visited from the highest score
/// down: `(threshold, tp, fp)` for the rule `score ≥ threshold`.
fn sweep(id: &[f64], ood: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Mann–Whitney AUROC: `P(ood > id) + ½ P(ood = id)`.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_inputs(id, ood)?;
    let (n, m) = (id.len() as f64, ood.len() as f64);
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0.0, 0.0);
    for (_, tp, fp) in sweep(id, ood) {
        let (tp, fp) = (tp as f64, fp as f64);
        // trapezoid over each tie group gives the half credit
        area += (fp - prev_fp) * (tp + prev_tp) / 2.0;
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(area / (n * m))
}

/// Area under the precision-recall curve with the precision envelope
/// `P̂(r) = max_{r' ≥ r} P(r')`, integrated stepwise over recall.
pub fn aupr(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_inputs(id, ood)?;
    let m = ood.len() as f64;
    let pts: Vec<(f64, f64)> = sweep(id, ood)
        .into_iter()
        .map(|(_, tp, fp)| (tp as f64 / m, tp as f64 / (tp + fp) as f64))
        .collect();
    let mut env = vec![0.0; pts.len()];
    let mut best: f64 = 0.0;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].1);
        env[i] = best;
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        area += (r - prev_r) * env[i];
        prev_r = r;
    }
    Ok(area)
}

fn meets_tpr95(tp: usize, positives: usize) -> bool {
    tp * 100 >= 95 * positives
}

/// Smallest FPR over observed-score thresholds whose TPR is at least 0.95.
pub fn fpr95(id: &[f64], ood: &[f64]) -> Result<f64> {
    check_inputs(id, ood)?;
    let n = id.len() as f64;
    let best = sweep(id, ood)
        .into_iter()
        .filter(|&(_, tp, _)| meets_tpr95(tp, ood.len()))
        .map(|(_, _, fp)| fp)
        .min()
        .expect("the lowest threshold flags every score");
    Ok(best as f64 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
}

/// ROC and PR operating points, highest threshold first.
pub fn curves(id: &[f64], ood: &[f64]) -> Result<Vec<CurvePoint>> {
    check_inputs(id, ood)?;
    let (n, m) = (id.len() as f64, ood.len() as f64);
    Ok(sweep(id, ood)
        .into_iter()
        .map(|(threshold, tp, fp)| CurvePoint {
            threshold,
            tpr: tp as f64 / m,
            fpr: fp as f64 / n,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / m,
        })
        .collect())
}

pub fn write_curves_csv<W: Write>(out: W, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("curve dump", e))?;
    Ok(())
}

/// F1 of integer predictions: binary (positive class 1) for `k = 2`,
/// otherwise the macro average over classes that occur in either vector.
pub fn f1(predictions: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dims("prediction count", labels.len(), predictions.len()));
    }
    if predictions.is_empty() {
        return Err(Error::validation("F1 of an empty set"));
    }
    if let Some(&c) = predictions.iter().chain(labels).find(|&&c| c >= k) {
        return Err(Error::Index {
            context: "F1 class",
            index: c,
            size: k,
        });
    }
    let class_f1 = |c: usize| {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == c, y == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        if tp == 0.0 {
            0.0
        } else {
            let (prec, rec) = (tp / (tp + fp), tp / (tp + fneg));
            2.0 * prec * rec / (prec + rec)
        }
    };
    if k == 2 {
        return Ok(class_f1(1));
    }
    let present: Vec<usize> = (0..k).filter(|c| predictions.contains(c) || labels.contains(c)).collect();
    Ok(present.iter().map(|&c| class_f1(c)).sum::<f64>() / present.len() as f64)
}

/// Row-wise argmax with ties to the lowest index.
pub fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    m.row_iter()
        .map(|r| {
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// `1 − max softmax`
    Msp,
    /// Shannon entropy of the softmax.
    Entropy,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax-based comparator score per logit row.
pub fn baseline_scores(logits: &DMatrix<f64>, kind: Baseline) -> Vec<f64> {
    logits
        .row_iter()
        .map(|r| {
            let p = softmax(&r.iter().copied().collect::<Vec<_>>());
            match kind {
                Baseline::Msp => 1.0 - p.iter().copied().fold(0.0, f64::max),
                Baseline::Entropy => -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>(),
            }
        })
        .collect()
}

/// Headline numbers of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub f1: Option<f64>,
    pub n_id: usize,
    pub n_ood: usize,
}

impl MetricsReport {
    pub fn compute(id: &[f64], ood: &[f64], f1: Option<f64>) -> Result<Self> {
        Ok(Self {
            auroc: auroc(id, ood)?,
            aupr: aupr(id, ood)?,
            fpr95: fpr95(id, ood)?,
            f1,
            n_id: id.len(),
            n_ood: ood.len(),
        })
    }

    /// `key=value` pairs on one line.
    pub fn to_line(&self) -> String {
        let mut s = format!("auroc={} aupr={} fpr95={}", self.auroc, self.aupr, self.fpr95);
        if let Some(f) = self.f1 {
            s.push_str(&format!(" f1={f}"));
        }
        s.push_str(&format!(" n_id={} n_ood={}", self.n_id, self.n_ood));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn auroc_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &o in ood {
            for &i in id {
                s += if o > i {
                    1.0
                } else if o == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    /// Every observed threshold evaluated by a full scan.
    fn points_oracle(id: &[f64], ood: &[f64]) -> Vec<(usize, usize)> {
        let mut th: Vec<f64> = id.iter().chain(ood).copied().collect();
        th.sort_by(f64::total_cmp);
        th.dedup();
        th.iter()
            .map(|&t| (ood.iter().filter(|&&s| s >= t).count(), id.iter().filter(|&&s| s >= t).count()))
            .collect()
    }

    fn aupr_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let m = ood.len() as f64;
        let pts: Vec<(f64, f64)> = points_oracle(id, ood)
            .into_iter()
            .map(|(tp, fp)| (tp as f64 / m, tp as f64 / (tp + fp) as f64))
            .collect();
        let mut recalls: Vec<f64> = pts.iter().map(|p| p.0).collect();
        recalls.push(0.0);
        recalls.sort_by(f64::total_cmp);
        recalls.dedup();
        let mut area = 0.0;
        for w in recalls.windows(2) {
            let envelope = pts.iter().filter(|p| p.0 >= w[1]).map(|p| p.1).fold(0.0, f64::max);
            area += (w[1] - w[0]) * envelope;
        }
        area
    }

    fn fpr95_oracle(id: &[f64], ood: &[f64]) -> f64 {
        points_oracle(id, ood)
            .into_iter()
            .filter(|&(tp, _)| tp as f64 / ood.len() as f64 >= 0.95 - 1e-12)
            .map(|(_, fp)| fp as f64 / id.len() as f64)
            .fold(1.0, f64::min)
    }

    #[test]
    fn aggregation_examples() {
        assert_abs_diff_eq!(aggregate_window_score(&[0.2, 0.4], Aggregation::Mean).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(aggregate_window_score(&[0.2, 0.4], Aggregation::Max).unwrap(), 0.4);
        for mode in [Aggregation::Mean, Aggregation::Max] {
            assert_eq!(aggregate_window_score(&[0.37], mode).unwrap(), 0.37);
        }
        assert!(aggregate_window_score(&[], Aggregation::Mean).is_err());
    }

    #[test]
    fn detect_examples() {
        assert!(detect(0.7, DEFAULT_THRESHOLD).flag);
        assert!(!detect(0.3, DEFAULT_THRESHOLD).flag);
        assert!(detect(0.5, DEFAULT_THRESHOLD).flag);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4], &[0.2, 0.9]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3, 0.1, 0.3], &[0.1, 0.3, 0.3]).unwrap(), 0.5);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_abs_diff_eq!(aupr(&[0.5, 0.6, 0.7], &[0.1]).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn fpr95_examples() {
        assert_eq!(fpr95(&[0.1, 0.2, 0.3, 0.95], &[0.5]).unwrap(), 0.25);
        assert_eq!(fpr95(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 0.0);
        assert_eq!(fpr95(&[0.8, 0.9], &[0.1, 0.2]).unwrap(), 1.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(f1(&[1, 0, 0], &[0, 1, 1], 2).unwrap(), 0.0);
        // tp = 1, fp = 1, fn = 0
        assert_abs_diff_eq!(f1(&[1, 1, 0], &[1, 0, 0], 2).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(f1(&[0, 2, 2], &[0, 2, 2], 4).unwrap(), 1.0);
        assert_eq!(f1(&[1, 2, 0], &[0, 1, 2], 3).unwrap(), 0.0);
        assert!(f1(&[0], &[0, 1], 2).is_err());
        assert!(f1(&[3], &[0], 2).is_err());
    }

    #[test]
    fn baseline_examples() {
        let uni = DMatrix::from_row_slice(1, 3, &[0.4, 0.4, 0.4]);
        assert_abs_diff_eq!(baseline_scores(&uni, Baseline::Msp)[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(baseline_scores(&uni, Baseline::Entropy)[0], 3f64.ln(), epsilon = 1e-15);

        let sharp = DMatrix::from_row_slice(1, 3, &[10.0, -10.0, -10.0]);
        assert!(baseline_scores(&sharp, Baseline::Msp)[0] < 1e-8);
        assert!(baseline_scores(&sharp, Baseline::Entropy)[0] < 1e-7);

        let two = DMatrix::from_row_slice(1, 2, &[3f64.ln(), 0.0]);
        assert_abs_diff_eq!(baseline_scores(&two, Baseline::Msp)[0], 0.25, epsilon = 1e-15);
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert_abs_diff_eq!(baseline_scores(&two, Baseline::Entropy)[0], h, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.5623, epsilon = 1e-4);
    }

    #[test]
    fn curve_points_and_csv() {
        let pts = curves(&[0.1, 0.4], &[0.2, 0.9]).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0].threshold, 0.9);
        assert_eq!((pts[3].tpr, pts[3].fpr), (1.0, 1.0));
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &pts).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("threshold,tpr,fpr,precision,recall\n0.9,0.5,0.0,1.0,0.5\n"));
    }

    #[test]
    fn report_line() {
        let r = MetricsReport::compute(&[0.1, 0.2, 0.3, 0.95], &[0.5], None).unwrap();
        assert_eq!(r.to_line(), "auroc=0.75 aupr=0.5 fpr95=0.25 n_id=4 n_ood=1");
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        // coarse grid so ties are common
        prop::collection::vec((0u32..20).prop_map(|v| v as f64 / 20.0), 1..50)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn fast_metrics_equal_oracles(id in scores(), ood in scores()) {
            prop_assert!((auroc(&id, &ood).unwrap() - auroc_oracle(&id, &ood)).abs() < 1e-12);
            prop_assert!((aupr(&id, &ood).unwrap() - aupr_oracle(&id, &ood)).abs() < 1e-12);
            prop_assert_eq!(fpr95(&id, &ood).unwrap(), fpr95_oracle(&id, &ood));
        }

        #[test]
        fn auroc_is_invariant_to_monotone_maps(id in scores(), ood in scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| (3.0 * x).exp() - 7.0).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&f(&id), &f(&ood)).unwrap());
        }

        #[test]
        fn shared_evidence_scale_preserves_uncertainty_ranking(
            ev in prop::collection::vec(prop::collection::vec(0.0f64..20.0, 3), 4..30),
            c in 0.1f64..10.0,
        ) {
            let u = |scale: f64| ev.iter().map(|e| 3.0 / (3.0 + scale * e.iter().sum::<f64>())).collect::<Vec<_>>();
            let (a, b) = (u(1.0), u(c));
            let half = a.len() / 2;
            prop_assert_eq!(auroc(&a[..half], &a[half..]).unwrap(), auroc(&b[..half], &b[half..]).unwrap());
        }
    }
}
