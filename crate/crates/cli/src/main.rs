//! `dgood`: command-line entry point for ingesting dynamic graphs, training
//! the evidential detector, generating OOD test sets and computing metrics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dyngraph_ood::checkpoint;
use dyngraph_ood::config::ExperimentConfig;
use dyngraph_ood::graph::{attach_node_labels, load_temporal_edgelist, Column, DynamicGraphSequence, EdgeListSchema};
use dyngraph_ood::oodgen::{make_ood_testset, FiSpec, LambdaDist, OodKind, SbmProbabilities, SbmSpec};
use dyngraph_ood::par::Execution;
use dyngraph_ood::results;
use dyngraph_ood::spectral::{augment, eigendecompose, laplacian, write_spectrum_csv, AugmentMode};
use dyngraph_ood::store::{load_sequence, save_sequence};
use dyngraph_ood::synthetic::{generate, SyntheticSpec};
use dyngraph_ood::train::{evaluate, train};
use dyngraph_ood::Error;

#[derive(Parser)]
#[command(name = "dgood", version, about = "Evidential OOD detection on discrete-time dynamic graphs")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a temporal edge list into the sequence format.
    Ingest(IngestArgs),
    /// Write a bundled synthetic sequence.
    Synth(SynthArgs),
    /// Train on the configured sequence; writes losses, config and checkpoint.
    Train(TrainArgs),
    /// Score ID and OOD test sets with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Generate an OOD version of a sequence.
    GenOod(GenOodArgs),
    /// Dump the spectra of the negative-sample Laplacians of a sequence.
    Augment(AugmentArgs),
    /// Recompute detection metrics from score files.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Edge list with `src, dst, timestep[, label]` columns.
    #[arg(long)]
    edges: PathBuf,
    /// Node features `node_id,v1,...,vd`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Static node labels `node_id,label`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Edge-list column mapping (JSON); defaults to columns 0, 1, 2.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    header: bool,
    /// Column index of per-edge labels.
    #[arg(long)]
    label_column: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    nodes: usize,
    #[arg(long, default_value_t = 12)]
    timesteps: usize,
    #[arg(long, default_value_t = 8)]
    features: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Sequence directory; overrides `data.sequence`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory; defaults to `<out-dir>/checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training sequence whose test split serves as ID test set.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    id_test: Option<PathBuf>,
    #[arg(long)]
    ood_test: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Sm,
    Fi,
}

#[derive(Args)]
struct GenOodArgs {
    /// Input sequence directory.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to the configured OOD kind.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Constant interpolation weight for `fi`; uniform on [0, 1] when absent.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of blocks for `sm`.
    #[arg(long)]
    blocks: Option<usize>,
    /// Fixed intra-block probability for `sm` (needs `--p-out`).
    #[arg(long, requires = "p_out")]
    p_in: Option<f64>,
    #[arg(long, requires = "p_in")]
    p_out: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Verbatim,
    Weighted,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    /// Preservation ratio; defaults to `augment.ratio`.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct MetricsArgs {
    /// ID score file; defaults to `<out-dir>/scores_id.csv`.
    #[arg(long)]
    id: Option<PathBuf>,
    /// OOD score file; defaults to `<out-dir>/scores_ood.csv`.
    #[arg(long)]
    ood: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> dyngraph_ood::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(path: Option<PathBuf>, what: &str) -> dyngraph_ood::Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {what} given (flag or config file)")))
}

fn open(path: &Path) -> dyngraph_ood::Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn report_sequence(seq: &DynamicGraphSequence, dir: &Path) {
    println!(
        "{} timesteps={} nodes={} features={} classes={} hash={}",
        dir.display(),
        seq.total_timesteps(),
        seq.num_nodes(),
        seq.feature_dim(),
        seq.num_classes(),
        seq.content_hash()
    );
}

fn run(cli: Cli) -> dyngraph_ood::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let out = &cli.out_dir;
    match &cli.command {
        Command::Ingest(a) => {
            let mut schema = match &a.schema {
                Some(p) => serde_json::from_reader(open(p)?)?,
                None => EdgeListSchema::default(),
            };
            schema.has_header |= a.header;
            if let Some(c) = a.label_column {
                schema.label = Some(Column::Index(c));
            }
            if a.num_classes.is_some() {
                schema.num_classes = a.num_classes;
            }
            let mut feats = a.features.as_deref().map(open).transpose()?;
            let mut seq = load_temporal_edgelist(
                open(&a.edges)?,
                &schema,
                feats.as_mut().map(|f| f as &mut dyn std::io::Read),
            )?;
            if let Some(l) = &a.labels {
                seq = attach_node_labels(&seq, open(l)?)?;
            }
            save_sequence(&seq, out)?;
            report_sequence(&seq, out);
        }
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                num_nodes: a.nodes,
                timesteps: a.timesteps,
                feature_dim: a.features,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let seq = generate(&spec)?;
            save_sequence(&seq, out)?;
            report_sequence(&seq, out);
        }
        Command::Train(a) => {
            let mut cfg = load_config(&cli)?;
            let path = required(a.data.clone().or(cfg.data.sequence.clone()), "training sequence")?;
            cfg.data.sequence = Some(path.clone());
            let data = load_sequence(&path)?;
            let state = train(&cfg, &data, exec)?;
            results::write_training(out, &cfg, &state)?;
            let last = state.history.last();
            println!(
                "epochs={} final_total={} best_epoch={} out={}",
                state.epoch,
                last.map_or(f64::NAN, |h| h.total),
                state.best.as_ref().map_or("none".to_string(), |b| b.epoch.to_string()),
                out.display()
            );
        }
        Command::Evaluate(a) => {
            let cfg = load_config(&cli)?;
            let ckpt = a.checkpoint.clone().unwrap_or_else(|| out.join(results::CHECKPOINT_DIR));
            let state = checkpoint::load(&ckpt)?;
            let id = match a.id_test.clone().or(cfg.data.id_test.clone()) {
                Some(p) => load_sequence(&p)?,
                None => {
                    let p = required(a.data.clone().or(cfg.data.sequence.clone()), "ID test sequence")?;
                    let (from, to) = cfg.splits.test_range();
                    load_sequence(&p)?.slice(from, to)?
                }
            };
            let ood = match a.ood_test.clone().or(cfg.data.ood_test.clone()) {
                Some(p) => load_sequence(&p)?,
                None => make_ood_testset(&id, &cfg.ood, exec)?,
            };
            let report = evaluate(&state.selected_model(), &cfg, &id, &ood, exec)?;
            results::write_evaluation(out, &report)?;
            print!("{}", results::metrics_lines(&report));
        }
        Command::GenOod(a) => {
            let cfg = load_config(&cli)?;
            let mut kind = match a.kind {
                None => cfg.ood.clone(),
                Some(KindArg::Sm) => OodKind::Sm(SbmSpec::default()),
                Some(KindArg::Fi) => OodKind::Fi(FiSpec::default()),
            };
            match &mut kind {
                OodKind::Fi(f) => {
                    if let Some(l) = a.lambda {
                        f.lambda = LambdaDist::Constant { value: l };
                    }
                    f.seed = cli.seed.unwrap_or(f.seed);
                }
                OodKind::Sm(s) => {
                    if let Some(b) = a.blocks {
                        s.num_blocks = b;
                    }
                    if let (Some(p_in), Some(p_out)) = (a.p_in, a.p_out) {
                        s.probabilities = SbmProbabilities::Fixed { p_in, p_out };
                    }
                    s.seed = cli.seed.unwrap_or(s.seed);
                }
            }
            let input = load_sequence(&a.input)?;
            let seq = make_ood_testset(&input, &kind, exec)?;
            save_sequence(&seq, out)?;
            report_sequence(&seq, out);
        }
        Command::Augment(a) => {
            let cfg = load_config(&cli)?;
            let ratio = a.ratio.unwrap_or(cfg.augment.ratio);
            let mode = match a.mode {
                None => cfg.augment.mode,
                Some(ModeArg::Verbatim) => AugmentMode::Verbatim,
                Some(ModeArg::Weighted) => AugmentMode::Weighted,
            };
            let seq = load_sequence(&a.input)?;
            let mut spectra = Vec::new();
            for s in seq.snapshots() {
                let neg = augment(&eigendecompose(&laplacian(s))?, ratio, mode)?;
                spectra.push((s.timestep(), eigendecompose(&neg.laplacian)?));
            }
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let path = out.join("spectra.csv");
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let refs: Vec<(usize, &_)> = spectra.iter().map(|(t, d)| (*t, d)).collect();
            write_spectrum_csv(f, &refs)?;
            println!("{}", path.display());
        }
        Command::Metrics(a) => {
            let (id_default, ood_default) = results::score_paths(out);
            let id = a.id.clone().unwrap_or(id_default);
            let ood = a.ood.clone().unwrap_or(ood_default);
            println!("{}", results::metrics_from_files(&id, &ood)?.to_line());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::Io { path, .. } = &e {
                record["path"] = serde_json::Value::String(path.display().to_string());
            }
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
