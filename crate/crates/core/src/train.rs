//! Training loop, window scoring and evaluation.
//!
//! Training walks the training windows in order, one parameter update per
//! window. Each update sees the original window and, when `ρ₂ > 0`, its
//! spectral negative pushed through the same encoder and head.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::ExperimentConfig;
use crate::edl::{evidence_of, DirichletOpinion};
use crate::encoder::{forward, forward_on_tape, HeadKind, Model, ParamVars, Params, Targets, WindowInput};
use crate::error::{Error, Result};
use crate::graph::{windows_in, DynamicGraphSequence, Labels, SnapshotWindow};
use crate::losses::{window_objective, LossBreakdown, LossWeights};
use crate::metrics::{self, aggregate_window_score, argmax_rows, Baseline, CurvePoint, MetricsReport};
use crate::optim::Optimizer;
use crate::par::{self, Execution};
use crate::spectral::{negative_window, SpectralCache};

/// Targets and class labels scored by the head for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTask {
    pub targets: Targets,
    pub labels: Vec<usize>,
}

fn link_seed(seed: u64, start: usize) -> u64 {
    seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Labelled targets of the window's final snapshot, or `None` when it has
/// none. Link prediction pairs every edge (class 1) with `negatives` sampled
/// non-edges (class 0).
pub fn window_task(
    window: &SnapshotWindow<'_>,
    head: HeadKind,
    seed: u64,
    negatives: usize,
) -> Result<Option<WindowTask>> {
    let last = window.last();
    let task = match head {
        HeadKind::NodeClassification => match last.labels() {
            Some(Labels::Node(v)) => {
                let (targets, labels): (Vec<usize>, Vec<usize>) =
                    v.iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c))).unzip();
                WindowTask {
                    targets: Targets::Nodes(targets),
                    labels,
                }
            }
            _ => return Err(Error::validation("node classification needs node labels")),
        },
        HeadKind::EdgeClassification => match last.labels() {
            Some(Labels::Edge(v)) => {
                let (targets, labels) = v.iter().copied().unzip();
                WindowTask {
                    targets: Targets::Pairs(targets),
                    labels,
                }
            }
            _ => return Err(Error::validation("edge classification needs edge labels")),
        },
        HeadKind::LinkPrediction => {
            let n = last.num_nodes();
            let mut rng = ChaCha8Rng::seed_from_u64(link_seed(seed, window.start()));
            let mut pairs: Vec<(usize, usize)> = last.edges().to_vec();
            let mut labels = vec![1; pairs.len()];
            let wanted = pairs.len() * negatives;
            let max_non_edges = n * n.saturating_sub(1) / 2 - pairs.len();
            let mut seen = std::collections::HashSet::new();
            while seen.len() < wanted.min(max_non_edges) {
                let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
                let key = (a.min(b), a.max(b));
                if a != b && !last.has_edge(a, b) && seen.insert(key) {
                    pairs.push(key);
                    labels.push(0);
                }
            }
            WindowTask {
                targets: Targets::Pairs(pairs),
                labels,
            }
        }
    };
    Ok(if task.labels.is_empty() { None } else { Some(task) })
}

/// Targets scored at inference: labelled targets when present, otherwise
/// every node (node head) or every edge of the final snapshot.
pub fn scoring_targets(window: &SnapshotWindow<'_>, head: HeadKind) -> Targets {
    let last = window.last();
    match head {
        HeadKind::NodeClassification => match last.labels() {
            Some(Labels::Node(v)) if v.iter().any(Option::is_some) => {
                Targets::Nodes(v.iter().enumerate().filter(|(_, c)| c.is_some()).map(|(i, _)| i).collect())
            }
            _ => Targets::Nodes((0..last.num_nodes()).collect()),
        },
        HeadKind::EdgeClassification => match last.labels() {
            Some(Labels::Edge(v)) if !v.is_empty() => Targets::Pairs(v.iter().map(|x| x.0).collect()),
            _ => Targets::Pairs(last.edges().to_vec()),
        },
        HeadKind::LinkPrediction => Targets::Pairs(last.edges().to_vec()),
    }
}

/// A training window with its inputs prepared once.
#[derive(Debug, Clone)]
pub struct PreparedWindow<'a> {
    pub start: usize,
    pub input: WindowInput<'a>,
    pub negative: Option<WindowInput<'a>>,
    pub task: WindowTask,
}

/// Windows of `[from, to)` with labelled targets; spectral negatives are
/// built only when `with_negatives`.
pub fn prepare_windows<'a>(
    seq: &'a DynamicGraphSequence,
    (from, to): (usize, usize),
    config: &ExperimentConfig,
    with_negatives: bool,
    cache: &SpectralCache,
    exec: Execution,
) -> Result<Vec<PreparedWindow<'a>>> {
    let windows = windows_in(seq, from, to, config.training.window)?;
    let out = par::try_map_slice(exec, &windows, |w| {
        let Some(task) = window_task(w, config.model.head, config.seed, config.training.link_negatives)? else {
            return Ok(None);
        };
        let negative = if with_negatives {
            let props = negative_window(w, config.augment.ratio, config.augment.mode, cache, Execution::Sequential)?;
            Some(WindowInput::with_propagators(w, props)?)
        } else {
            None
        };
        Ok::<_, Error>(Some(PreparedWindow {
            start: w.start(),
            input: WindowInput::from_window(w),
            negative,
            task,
        }))
    })?;
    Ok(out.into_iter().flatten().collect())
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce_edl: f64,
    pub kl: f64,
    pub cl: f64,
    pub total: f64,
    /// Mean evidential cross-entropy on validation windows.
    pub val_loss: Option<f64>,
}

/// Parameters with the lowest validation loss so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    /// Completed epochs.
    pub epoch: usize,
    pub model: Model,
    pub optimizer: Optimizer,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl TrainingState {
    /// Seeded initialization for `data`'s feature width and class count.
    pub fn init(config: &ExperimentConfig, data: &DynamicGraphSequence) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(config.model_config(data.feature_dim(), data.num_classes()), &mut rng)?;
        let t = &config.training;
        let optimizer = Optimizer::new(t.optimizer, t.learning_rate, t.momentum, t.grad_clip, &model.params);
        Ok(Self {
            epoch: 0,
            model,
            optimizer,
            best: None,
            history: Vec::new(),
        })
    }

    /// Best-validation parameters, or the current ones when no validation
    /// window exists.
    pub fn selected_model(&self) -> Model {
        match &self.best {
            Some(b) => Model {
                config: self.model.config.clone(),
                params: b.params.clone(),
            },
            None => self.model.clone(),
        }
    }
}

fn effective_weights(config: &ExperimentConfig, epoch: usize) -> LossWeights {
    let mut w = config.training.loss_weights();
    let warm = config.training.kl_warmup_epochs;
    if warm > 0 {
        w.rho1 *= ((epoch + 1) as f64 / warm as f64).min(1.0);
    }
    w
}

fn divergence(epoch: usize, start: usize, detail: serde_json::Value) -> Error {
    Error::Divergence {
        epoch,
        window_start: start,
        detail: detail.to_string(),
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// One update on one window; returns the pre-update losses.
fn train_window(
    state: &mut TrainingState,
    pw: &PreparedWindow<'_>,
    weights: &LossWeights,
    clamp: f64,
) -> Result<LossBreakdown> {
    let epoch = state.epoch;
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, &state.model.params);
    let out = forward_on_tape(&mut tape, &vars, &state.model.config, &pw.input, &pw.task.targets)?;
    let neg = match &pw.negative {
        Some(ni) if weights.rho2 > 0.0 => {
            Some(forward_on_tape(&mut tape, &vars, &state.model.config, ni, &pw.task.targets)?)
        }
        _ => None,
    };
    let logits = tape.value(out);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(divergence(epoch, pw.start, serde_json::json!({ "reason": "non-finite logits" })));
    }
    let obj = window_objective(logits, neg.map(|v| tape.value(v)), &pw.task.labels, weights, clamp)?;
    if !obj.breakdown.is_finite() {
        return Err(divergence(
            epoch,
            pw.start,
            serde_json::json!({
                "reason": "non-finite loss",
                "losses": obj.breakdown,
                "max_abs_logit": max_abs(logits),
            }),
        ));
    }
    let mut seeds = vec![(out, obj.grad_logits)];
    if let (Some(v), Some(g)) = (neg, obj.grad_neg_logits) {
        seeds.push((v, g));
    }
    let grads = vars.gradients(&tape, &tape.backward(&seeds)?);
    if !grads.is_finite() {
        return Err(divergence(
            epoch,
            pw.start,
            serde_json::json!({ "reason": "non-finite gradient", "losses": obj.breakdown }),
        ));
    }
    state.optimizer.step(&mut state.model.params, &grads);
    if !state.model.params.is_finite() {
        return Err(divergence(
            epoch,
            pw.start,
            serde_json::json!({ "reason": "non-finite parameters after update", "losses": obj.breakdown }),
        ));
    }
    Ok(obj.breakdown)
}

/// Mean evidential cross-entropy of `model` over prepared windows.
pub fn task_loss(model: &Model, windows: &[PreparedWindow<'_>], clamp: f64, exec: Execution) -> Result<f64> {
    let per = par::try_map_slice(exec, windows, |pw| {
        let logits = forward(model, &pw.input, &pw.task.targets)?;
        let obj = window_objective(&logits, None, &pw.task.labels, &LossWeights::new(0.0, 0.0), clamp)?;
        Ok::<_, Error>(obj.breakdown.ce_edl)
    })?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Runs `epochs` more epochs.
pub fn fit(
    state: &mut TrainingState,
    config: &ExperimentConfig,
    train: &[PreparedWindow<'_>],
    val: &[PreparedWindow<'_>],
    epochs: usize,
    exec: Execution,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clamp = config.training.logit_clamp;
    for _ in 0..epochs {
        let weights = effective_weights(config, state.epoch);
        let mut sums = [0.0; 4];
        for pw in train {
            let b = train_window(state, pw, &weights, clamp)?;
            for (s, v) in sums.iter_mut().zip([b.ce_edl, b.kl, b.cl, b.total]) {
                *s += v;
            }
        }
        let n = train.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(task_loss(&state.model, val, clamp, exec)?)
        };
        state.history.push(EpochRecord {
            epoch: state.epoch,
            ce_edl: sums[0] / n,
            kl: sums[1] / n,
            cl: sums[2] / n,
            total: sums[3] / n,
            val_loss,
        });
        if let Some(v) = val_loss {
            if state.best.as_ref().is_none_or(|b| v < b.val_loss) {
                state.best = Some(BestSnapshot {
                    epoch: state.epoch,
                    val_loss: v,
                    params: state.model.params.clone(),
                });
            }
        }
        log::debug!("epoch {} total {:.6} val {:?}", state.epoch, sums[3] / n, val_loss);
        state.epoch += 1;
    }
    Ok(())
}

fn check_splits(config: &ExperimentConfig, data: &DynamicGraphSequence) -> Result<()> {
    if config.splits.total() != data.total_timesteps() {
        return Err(Error::Config(format!(
            "splits ({} + {} + {}) must cover all {} timesteps",
            config.splits.train,
            config.splits.val,
            config.splits.test,
            data.total_timesteps()
        )));
    }
    Ok(())
}

/// Seeded initialization followed by `config.training.epochs` epochs on the
/// training split, selecting by validation loss.
pub fn train(config: &ExperimentConfig, data: &DynamicGraphSequence, exec: Execution) -> Result<TrainingState> {
    config.validate()?;
    check_splits(config, data)?;
    let mut state = TrainingState::init(config, data)?;
    let cache = SpectralCache::new(config.augment.large_n_threshold);
    let with_neg = config.training.rho2 > 0.0;
    let train = prepare_windows(data, config.splits.train_range(), config, with_neg, &cache, exec)?;
    let val = prepare_windows(data, config.splits.val_range(), config, false, &cache, exec)?;
    fit(&mut state, config, &train, &val, config.training.epochs, exec)?;
    Ok(state)
}

/// Scores of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub start: usize,
    pub targets: Targets,
    pub logits: DMatrix<f64>,
    /// Uncertainty mass `u` per target.
    pub uncertainty: Vec<f64>,
    pub msp: Vec<f64>,
    pub entropy: Vec<f64>,
}

impl WindowScores {
    /// Predicted class per target: argmax of the expected probability,
    /// ties resolved by the raw logits.
    pub fn predictions(&self, clamp: f64) -> Vec<usize> {
        let alpha = self.logits.map(|l| evidence_of(l, clamp) + 1.0);
        let by_logit = argmax_rows(&self.logits);
        argmax_rows(&alpha)
            .into_iter()
            .zip(by_logit)
            .enumerate()
            .map(|(i, (a, l))| if alpha[(i, a)] == alpha[(i, l)] { l } else { a })
            .collect()
    }
}

/// Scores every window of `seq` of length `window_len`.
pub fn score_sequence(
    model: &Model,
    seq: &DynamicGraphSequence,
    window_len: usize,
    clamp: f64,
    exec: Execution,
) -> Result<Vec<WindowScores>> {
    let windows = windows_in(seq, 0, seq.total_timesteps(), window_len)?;
    let scored = par::try_map_slice(exec, &windows, |w| {
        let targets = scoring_targets(w, model.config.head);
        if targets.is_empty() {
            log::warn!("window at {} has no targets to score; skipped", w.start());
            return Ok(None);
        }
        let logits = forward(model, &WindowInput::from_window(w), &targets)?;
        let uncertainty = logits
            .row_iter()
            .map(|r| {
                let alpha: Vec<f64> = r.iter().map(|&l| evidence_of(l, clamp) + 1.0).collect();
                DirichletOpinion::from_alpha(alpha).map(|o| o.uncertainty())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>(Some(WindowScores {
            start: w.start(),
            msp: metrics::baseline_scores(&logits, Baseline::Msp),
            entropy: metrics::baseline_scores(&logits, Baseline::Entropy),
            targets,
            logits,
            uncertainty,
        }))
    })?;
    Ok(scored.into_iter().flatten().collect())
}

/// One evaluation unit: a window, or a target inside a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub window: usize,
    pub target: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScoreKind {
    Uncertainty,
    Msp,
    Entropy,
}

fn score_rows(scores: &[WindowScores], kind: ScoreKind, config: &ExperimentConfig) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for w in scores {
        let v = match kind {
            ScoreKind::Uncertainty => &w.uncertainty,
            ScoreKind::Msp => &w.msp,
            ScoreKind::Entropy => &w.entropy,
        };
        if config.detect.per_node {
            rows.extend(v.iter().enumerate().map(|(i, &score)| ScoreRow {
                window: w.start,
                target: Some(i),
                score,
            }));
        } else {
            rows.push(ScoreRow {
                window: w.start,
                target: None,
                score: aggregate_window_score(v, config.detect.aggregation)?,
            });
        }
    }
    Ok(rows)
}

fn values(rows: &[ScoreRow]) -> Vec<f64> {
    rows.iter().map(|r| r.score).collect()
}

/// Labelled F1 over scored windows; `None` when nothing is labelled.
pub fn scored_f1(
    scores: &[WindowScores],
    seq: &DynamicGraphSequence,
    config: &ExperimentConfig,
    num_classes: usize,
) -> Result<Option<f64>> {
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for w in scores {
        let win = crate::graph::window(seq, w.start, config.training.window)?;
        let Some(task) = window_task(&win, config.model.head, config.seed, config.training.link_negatives)? else {
            continue;
        };
        let p = w.predictions(config.training.logit_clamp);
        if task.targets != w.targets {
            // link prediction scores positives only; recompute on the task's pairs
            continue;
        }
        pred.extend(p);
        gold.extend(task.labels);
    }
    if gold.is_empty() {
        Ok(None)
    } else {
        metrics::f1(&pred, &gold, num_classes).map(Some)
    }
}

/// F1 of `model` on the labelled windows of `[from, to)` in `seq`.
pub fn split_f1(
    model: &Model,
    seq: &DynamicGraphSequence,
    (from, to): (usize, usize),
    config: &ExperimentConfig,
    exec: Execution,
) -> Result<f64> {
    let cache = SpectralCache::default();
    let windows = prepare_windows(seq, (from, to), config, false, &cache, exec)?;
    if windows.is_empty() {
        return Err(Error::validation("no labelled windows in the requested split"));
    }
    let per = par::try_map_slice(exec, &windows, |pw| {
        let logits = forward(model, &pw.input, &pw.task.targets)?;
        let ws = WindowScores {
            start: pw.start,
            targets: pw.task.targets.clone(),
            logits,
            uncertainty: Vec::new(),
            msp: Vec::new(),
            entropy: Vec::new(),
        };
        Ok::<_, Error>((ws.predictions(config.training.logit_clamp), pw.task.labels.clone()))
    })?;
    let (pred, gold): (Vec<usize>, Vec<usize>) = per.into_iter().flat_map(|(p, g)| p.into_iter().zip(g)).unzip();
    metrics::f1(&pred, &gold, model.config.num_classes)
}

/// Detection rates at each threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// TPR/FPR of the rule `score ≥ γ` for each `γ`.
pub fn threshold_sweep(id: &[f64], ood: &[f64], gammas: &[f64]) -> Vec<SweepPoint> {
    gammas
        .iter()
        .map(|&g| {
            let flagged = |v: &[f64]| v.iter().filter(|&&s| metrics::detect(s, g).flag).count() as f64 / v.len().max(1) as f64;
            SweepPoint {
                threshold: g,
                tpr: flagged(ood),
                fpr: flagged(id),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub uncertainty: MetricsReport,
    pub msp: MetricsReport,
    pub entropy: MetricsReport,
    pub id_scores: Vec<ScoreRow>,
    pub ood_scores: Vec<ScoreRow>,
    pub curves: Vec<CurvePoint>,
    /// Detection at the configured threshold γ.
    pub at_threshold: SweepPoint,
}

/// Scores both test sets and computes detection metrics for the
/// uncertainty score and both softmax baselines.
pub fn evaluate(
    model: &Model,
    config: &ExperimentConfig,
    id_test: &DynamicGraphSequence,
    ood_test: &DynamicGraphSequence,
    exec: Execution,
) -> Result<EvaluationReport> {
    let clamp = config.training.logit_clamp;
    let len = config.training.window;
    let id = score_sequence(model, id_test, len, clamp, exec)?;
    let ood = score_sequence(model, ood_test, len, clamp, exec)?;
    if id.is_empty() || ood.is_empty() {
        return Err(Error::validation(format!(
            "evaluation needs at least one window per test set (got {} ID, {} OOD)",
            id.len(),
            ood.len()
        )));
    }
    let f1 = scored_f1(&id, id_test, config, model.config.num_classes)?;
    let report = |kind| -> Result<(MetricsReport, Vec<ScoreRow>, Vec<ScoreRow>)> {
        let a = score_rows(&id, kind, config)?;
        let b = score_rows(&ood, kind, config)?;
        Ok((MetricsReport::compute(&values(&a), &values(&b), f1)?, a, b))
    };
    let (uncertainty, id_scores, ood_scores) = report(ScoreKind::Uncertainty)?;
    let (msp, _, _) = report(ScoreKind::Msp)?;
    let (entropy, _, _) = report(ScoreKind::Entropy)?;
    let (iv, ov) = (values(&id_scores), values(&ood_scores));
    Ok(EvaluationReport {
        uncertainty,
        msp,
        entropy,
        curves: metrics::curves(&iv, &ov)?,
        at_threshold: threshold_sweep(&iv, &ov, &[config.detect.threshold])[0],
        id_scores,
        ood_scores,
    })
}

/// Shuffled copy of `items` under `seed`; used to draw disjoint seed pools.
pub fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{window, GraphSnapshot};
    use crate::oodgen::{make_ood_testset, FiSpec, LambdaDist, OodKind};
    use crate::synthetic::{generate, SyntheticSpec};

    fn small_config(epochs: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.model.hidden_dim = 8;
        c.training.epochs = epochs;
        c
    }

    fn data(seed: u64) -> DynamicGraphSequence {
        generate(&SyntheticSpec {
            num_nodes: 20,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = small_config(0);
        let d = data(0);
        let st = train(&cfg, &d, Execution::Parallel).unwrap();
        assert_eq!(st.model, TrainingState::init(&cfg, &d).unwrap().model);
        assert!(st.history.is_empty());
        assert!(st.best.is_none());
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let cfg = small_config(3);
        let d = data(1);
        let a = train(&cfg, &d, Execution::Parallel).unwrap();
        let b = train(&cfg, &d, Execution::Sequential).unwrap();
        assert_eq!(a.history.len(), 3);
        assert_eq!(a, b);
        assert!(a.history.iter().all(|r| r.val_loss.is_some()));
        assert!(a.best.is_some());
    }

    #[test]
    fn zero_contrastive_weight_skips_negatives_consistently() {
        let mut cfg = small_config(2);
        cfg.training.rho2 = 0.0;
        let d = data(2);
        let st = train(&cfg, &d, Execution::Parallel).unwrap();
        // same run with negatives prepared but unused
        let mut manual = TrainingState::init(&cfg, &d).unwrap();
        let cache = SpectralCache::default();
        let tr = prepare_windows(&d, cfg.splits.train_range(), &cfg, true, &cache, Execution::Parallel).unwrap();
        let va = prepare_windows(&d, cfg.splits.val_range(), &cfg, false, &cache, Execution::Parallel).unwrap();
        fit(&mut manual, &cfg, &tr, &va, 2, Execution::Parallel).unwrap();
        assert_eq!(st, manual);
        assert!(st.history.iter().all(|r| r.cl == 0.0));
    }

    #[test]
    fn splits_must_cover_the_sequence() {
        let mut cfg = small_config(1);
        cfg.splits.test = 4;
        assert!(matches!(train(&cfg, &data(0), Execution::Parallel), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let cfg = small_config(1);
        let d = data(3);
        let huge = d
            .map_snapshots(d.provenance, Execution::Sequential, |s| s.with_features(s.features() * 1e308))
            .unwrap();
        match train(&cfg, &huge, Execution::Parallel) {
            Err(Error::Divergence { epoch, window_start, detail }) => {
                assert_eq!((epoch, window_start), (0, 0));
                assert!(detail.contains("non-finite"), "{detail}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn link_task_balances_positive_and_negative_pairs() {
        let d = data(4);
        let w = window(&d, 0, 2).unwrap();
        let t = window_task(&w, HeadKind::LinkPrediction, 0, 1).unwrap().unwrap();
        let pos = t.labels.iter().filter(|&&c| c == 1).count();
        assert_eq!(pos, w.last().edges().len());
        assert_eq!(t.labels.len(), 2 * pos);
        let Targets::Pairs(p) = &t.targets else { panic!() };
        for (&(a, b), &c) in p.iter().zip(&t.labels) {
            assert_eq!(w.last().has_edge(a, b), c == 1);
        }
        assert_eq!(window_task(&w, HeadKind::LinkPrediction, 0, 1).unwrap().unwrap(), t);
    }

    #[test]
    fn unlabelled_windows_are_skipped() {
        let snaps = (0..3)
            .map(|t| GraphSnapshot::new(t, 4, [(0, 1)], DMatrix::zeros(4, 2), Some(Labels::Node(vec![None; 4]))).unwrap())
            .collect();
        let seq = DynamicGraphSequence::new(snaps, 2, None).unwrap();
        let w = window(&seq, 0, 3).unwrap();
        assert!(window_task(&w, HeadKind::NodeClassification, 0, 1).unwrap().is_none());
        assert_eq!(scoring_targets(&w, HeadKind::NodeClassification), Targets::Nodes(vec![0, 1, 2, 3]));
    }

    #[test]
    fn evaluation_on_identical_sets_is_chance() {
        let cfg = small_config(2);
        let d = data(5);
        let st = train(&cfg, &d, Execution::Parallel).unwrap();
        let test = d.slice(6, 12).unwrap();
        let same = make_ood_testset(
            &test,
            &OodKind::Fi(FiSpec {
                lambda: LambdaDist::Constant { value: 1.0 },
                ..Default::default()
            }),
            Execution::Parallel,
        )
        .unwrap();
        let rep = evaluate(&st.selected_model(), &cfg, &test, &same, Execution::Parallel).unwrap();
        assert_eq!(rep.uncertainty.auroc, 0.5);
        assert_eq!(rep.uncertainty.n_id, 4);
        assert!(rep.uncertainty.f1.is_some());
    }

    #[test]
    fn threshold_sweep_is_monotone() {
        let id = [0.1, 0.3, 0.35, 0.6];
        let ood = [0.2, 0.5, 0.7, 0.9];
        let gammas: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let pts = threshold_sweep(&id, &ood, &gammas);
        for w in pts.windows(2) {
            assert!(w[1].tpr <= w[0].tpr);
            assert!(w[1].fpr <= w[0].fpr);
        }
        assert_eq!(threshold_sweep(&id, &ood, &[0.5])[0].tpr, 0.75);
    }
}
