//! Command-line interface.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::engine::{run_training, RunOptions, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, DEFAULT_KS};
use crate::predict::{predict_file, PredictOptions};
use crate::sparse::{self, Dataset, PowerLawSpec};
use crate::store::{model_stats, HistogramSpec};
use crate::sweep::{select_c, sweep_delta, DEFAULT_C_GRID};
use crate::tron::SolverConfig;

#[derive(Debug, Parser)]
#[command(
    name = "dismec",
    version,
    about = "Distributed sparse one-vs-rest linear classifiers for extreme multi-label data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train (or keep training) a model directory.
    Train(TrainArgs),
    /// Write ranked top-k labels for every test row.
    Predict(PredictArgs),
    /// Compute P@k and nDCG@k of a predictions file.
    Evaluate(EvaluateArgs),
    /// Re-prune a delta = 0 model at several thresholds and evaluate each.
    SweepDelta(SweepArgs),
    /// Generate a synthetic power-law dataset.
    Gen(GenArgs),
    /// Weight statistics of a trained model.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = crate::engine::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = crate::engine::DEFAULT_BATCH_SIZE, value_parser = positive)]
    pub batch_size: usize,
    /// Solver threads per batch.
    #[arg(long, env = "DISMEC_THREADS", value_parser = positive)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub bias: bool,
    /// Relative gradient-norm tolerance of the solver.
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    /// Continue a run whose manifest already exists.
    #[arg(long)]
    pub resume: bool,
    /// Choose C on a held-out tenth of the training rows.
    #[arg(long)]
    pub validate: bool,
    /// Seconds after which another worker's unfinished claim is taken over.
    #[arg(long, default_value_t = 1800)]
    pub claim_timeout: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = positive)]
    pub topk: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the training-time row normalization.
    #[arg(long)]
    pub normalize: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset file whose label lists are the ground truth.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub k: Vec<usize>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test dataset to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Ground truth; defaults to the labels in `--data`.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.001, 0.01, 0.1])]
    pub deltas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    pub k: Vec<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub labels: usize,
    #[arg(long)]
    pub features: usize,
    #[arg(long)]
    pub head_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Writes `<prefix>.train.txt` and `<prefix>.test.txt`.
    #[arg(long)]
    pub out_prefix: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of instances (default: half the total label count, at least the head size).
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub prototype_nnz: usize,
    #[arg(long, default_value_t = 10)]
    pub noise_nnz: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    #[arg(long)]
    pub json: bool,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let has_header = sparse::sniff_header(path)?;
    let (ds, report) = sparse::load_xmc_with(
        path,
        &sparse::LoadOptions {
            has_header,
            ..Default::default()
        },
    )?;
    if report.duplicate_labels > 0 {
        warn!(
            "{}: dropped {} duplicate labels",
            path.display(),
            report.duplicate_labels
        );
    }
    if report.explicit_zeros > 0 {
        warn!(
            "{}: dropped {} explicit zeros",
            path.display(),
            report.explicit_zeros
        );
    }
    Ok(ds)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => {
            let report = metrics::evaluate(&a.gold, &a.preds, &a.k)?;
            if a.json {
                println!("{}", report.to_json());
            } else {
                println!("{report}");
            }
            Ok(())
        }
        Command::SweepDelta(a) => {
            let test = load_dataset(&a.data)?;
            let gold = match &a.gold {
                Some(p) => load_dataset(p)?.labels,
                None => test.labels.clone(),
            };
            let table = sweep_delta(&a.model, &test, &gold, &a.deltas, &a.k)?;
            if a.json {
                println!("{}", json(&table));
            } else {
                println!("{table}");
            }
            Ok(())
        }
        Command::Gen(a) => gen(a),
        Command::Stats(a) => {
            let spec = HistogramSpec {
                bins: a.bins,
                small_threshold: a.threshold,
                ..Default::default()
            };
            if spec.bins == 0 {
                return Err(Error::Config("need at least one bin".into()));
            }
            let s = model_stats(&a.model, &spec)?;
            if a.json {
                println!("{}", json(&s));
            } else {
                println!("nonzeros        {}", s.total_nnz);
                println!("bytes           {}", s.bytes);
                println!("blocks          {}", s.per_block_nnz.len());
                println!(
                    "|w| < {}  {:.4} of stored, {:.4} of all D x L",
                    s.small_threshold, s.small_fraction_stored, s.small_fraction_dense
                );
            }
            Ok(())
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig {
        solver: SolverConfig {
            c: a.c,
            eps: a.eps,
            ..Default::default()
        },
        delta: a.delta,
        batch_size: a.batch_size,
        normalize: !a.no_normalize,
        bias: a.bias,
        ..Default::default()
    };
    if let Some(t) = a.threads {
        cfg.workers_per_batch = t;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    info!(
        "{}: {} rows, {} features, {} labels",
        a.data.display(),
        ds.n_rows(),
        ds.n_features(),
        ds.n_labels()
    );
    if a.validate {
        let sel = select_c(&ds, &cfg, &DEFAULT_C_GRID)?;
        info!(
            "selected C = {} (validation P@1 {:?})",
            sel.best_c, sel.scores
        );
        cfg.solver.c = sel.best_c;
    }
    let opts = RunOptions {
        stale_after: Duration::from_secs(a.claim_timeout),
        resume: a.resume,
        ..Default::default()
    };
    let out = run_training(&ds, &cfg, &a.out, &opts)?;
    println!(
        "model complete: {} blocks, {} nonzeros; trained {} batches in this process",
        out.manifest.n_batches,
        out.manifest.total_nnz.unwrap_or(0),
        out.trained.len()
    );
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let report = predict_file(
        &a.data,
        &a.model,
        &a.out,
        &PredictOptions {
            k: a.topk,
            normalize: a.normalize,
        },
    )?;
    eprintln!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1], got {}",
            a.test_fraction
        )));
    }
    let spec = PowerLawSpec {
        n_labels: a.labels,
        head_size: a.head_size,
        beta: a.beta,
        n_features: a.features,
        prototype_nnz: a.prototype_nnz,
        noise_nnz: a.noise_nnz,
        n_instances: a.instances,
        seed: a.seed,
    };
    let ds = sparse::generate_powerlaw(&spec)?;
    let (train, test) = sparse::train_test_split(&ds, a.test_fraction, a.seed);
    for (suffix, part) in [("train", &train), ("test", &test)] {
        let path = PathBuf::from(format!("{}.{suffix}.txt", a.out_prefix));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        sparse::write_xmc(part, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        println!("{}: {} rows", path.display(), part.n_rows());
    }
    Ok(())
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Incomplete { .. } => 3,
        Error::Config(_) => 2,
        _ => 1,
    }
}
