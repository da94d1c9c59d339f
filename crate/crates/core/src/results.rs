//! Results directory layout.
//!
//! ```text
//! config-resolved    fully resolved TOML configuration
//! losses.csv         epoch,ce_edl,kl,cl,total
//! scores_id.csv      window,target,score
//! scores_ood.csv     window,target,score
//! curves.csv         threshold,tpr,fpr,precision,recall
//! metrics.txt        one `name key=value ...` line per score
//! checkpoint/        see [`crate::checkpoint`]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::train::{EpochRecord, EvaluationReport, ScoreRow, TrainingState};

pub const CONFIG_FILE: &str = "config-resolved";
pub const LOSSES_FILE: &str = "losses.csv";
pub const SCORES_ID_FILE: &str = "scores_id.csv";
pub const SCORES_OOD_FILE: &str = "scores_ood.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    ce_edl: f64,
    kl: f64,
    cl: f64,
    total: f64,
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_losses(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write_rows(
        path,
        history.iter().map(|h| LossRow {
            epoch: h.epoch,
            ce_edl: h.ce_edl,
            kl: h.kl,
            cl: h.cl,
            total: h.total,
        }),
    )
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_rows(path, rows)
}

/// Reads a `window,target,score` file; an empty target marks a window row.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let rows = r.deserialize().collect::<std::result::Result<Vec<ScoreRow>, _>>()?;
    if let Some(bad) = rows.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::validation(format!(
            "{}: non-finite score for window {}",
            path.display(),
            bad.window
        )));
    }
    Ok(rows)
}

/// Writes the configuration, loss history and checkpoint of a training run.
pub fn write_training(dir: &Path, config: &ExperimentConfig, state: &TrainingState) -> Result<()> {
    create(dir)?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_toml_string()?).map_err(|e| Error::io(cfg_path, e))?;
    write_losses(&dir.join(LOSSES_FILE), &state.history)?;
    checkpoint::save(state, &dir.join(CHECKPOINT_DIR))
}

pub fn metrics_lines(report: &EvaluationReport) -> String {
    let a = report.at_threshold;
    format!(
        "uncertainty {}\nmsp {}\nentropy {}\nthreshold={} tpr={} fpr={}\n",
        report.uncertainty.to_line(),
        report.msp.to_line(),
        report.entropy.to_line(),
        a.threshold,
        a.tpr,
        a.fpr
    )
}

/// Writes scores, curves and metrics of an evaluation run.
pub fn write_evaluation(dir: &Path, report: &EvaluationReport) -> Result<()> {
    create(dir)?;
    write_scores(&dir.join(SCORES_ID_FILE), &report.id_scores)?;
    write_scores(&dir.join(SCORES_OOD_FILE), &report.ood_scores)?;
    let curves_path = dir.join(CURVES_FILE);
    let f = fs::File::create(&curves_path).map_err(|e| Error::io(&curves_path, e))?;
    metrics::write_curves_csv(f, &report.curves)?;
    let m = dir.join(METRICS_FILE);
    fs::write(&m, metrics_lines(report)).map_err(|e| Error::io(m, e))
}

/// Detection metrics recomputed from two score files.
pub fn metrics_from_files(id: &Path, ood: &Path) -> Result<MetricsReport> {
    let values = |p: &Path| -> Result<Vec<f64>> { Ok(read_scores(p)?.iter().map(|r| r.score).collect()) };
    MetricsReport::compute(&values(id)?, &values(ood)?, None)
}

/// `dir/scores_id.csv` and `dir/scores_ood.csv`.
pub fn score_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(SCORES_ID_FILE), dir.join(SCORES_OOD_FILE))
}
