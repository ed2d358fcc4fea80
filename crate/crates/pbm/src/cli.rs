//! Command-line surface: `train`, `predict`, and `bench`.
//!
//! Every resolved setting of a training run (including defaults) is written
//! to a manifest JSON next to the model; rerunning with the same flags and
//! seed reproduces the model and trace byte for byte (set
//! `PBM_TRACE_ZERO_TIME=1` to zero out the wall-clock column of the trace).
//! `PBM_THREADS` caps physical parallelism without changing the logical
//! worker count.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{load_libsvm, Dataset};
use crate::kernel::KernelSpec;
use crate::local_solver::Strategy;
use crate::loss::LossSpec;
use crate::predict::{accuracy_with_threads, predict_labels, Model, PredictMode};
use crate::train::{train, LineSearchKind, PartitionMode, TrainConfig, TrainTrace};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
/// Training stopped at the iteration cap without reaching the tolerance.
pub const EXIT_MAX_ITERS: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
/// Input data unusable for the request (e.g. local prediction without centers).
pub const EXIT_DATAERR: i32 = 65;
pub const EXIT_IOERR: i32 = 74;

#[derive(Parser)]
#[command(
    name = "pbm",
    version,
    about = "Parallel block minimization for kernel machines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a kernel SVM or kernel logistic regression model.
    Train(TrainArgs),
    /// Predict labels for a LIBSVM file with a trained model.
    Predict(PredictArgs),
    /// Compare partition modes and worker counts; emit relative-error curves.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Hinge,
    Logistic,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Gaussian,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Random,
    Kmeans,
}

#[derive(Clone, Copy, ValueEnum)]
enum LineSearchArg {
    Armijo,
    Optimal,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Greedy,
    Random,
    Cyclic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Global,
    Local,
}

/// `--inner-budget N` or `--inner-budget unlimited`.
#[derive(Debug, Clone, Copy)]
struct BudgetArg(Option<u64>);

fn parse_budget(s: &str) -> Result<BudgetArg, String> {
    if s.eq_ignore_ascii_case("unlimited") {
        return Ok(BudgetArg(None));
    }
    s.parse::<u64>()
        .map(|v| BudgetArg(Some(v)))
        .map_err(|_| format!("expected a positive integer or 'unlimited', got {s:?}"))
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Training data in LIBSVM format (.gz accepted).
    #[arg(long)]
    data: PathBuf,
    /// Optional test data; accuracy is reported after training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hinge")]
    loss: LossArg,
    /// Regularization constant.
    #[arg(long = "C", default_value_t = 1.0)]
    c: f64,
    /// Gaussian kernel width.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    kernel: KernelArg,
    /// Number of logical workers (blocks).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value = "kmeans")]
    partition: PartitionArg,
    /// kmeans runs on a subsample of at most this many points.
    #[arg(long, default_value_t = 20_000)]
    subsample: usize,
    /// Armijo constant in (0, 1).
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    /// Default: optimal for hinge, armijo for logistic.
    #[arg(long = "line-search", value_enum)]
    line_search: Option<LineSearchArg>,
    #[arg(long = "inner-strategy", value_enum, default_value = "greedy")]
    inner_strategy: StrategyArg,
    /// Inner epochs per outer iteration, or 'unlimited'.
    #[arg(long = "inner-budget", value_parser = parse_budget, default_value = "5")]
    inner_budget: BudgetArg,
    /// Outer stopping tolerance on the optimality residual.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long = "max-iters", default_value_t = 500)]
    max_iters: u64,
    /// Kernel cache (and dense-block budget) in MiB.
    #[arg(long = "cache-mb", default_value_t = 1024)]
    cache_mb: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "model-out", default_value = "model.json")]
    model_out: PathBuf,
    #[arg(long = "trace-out", default_value = "trace.csv")]
    trace_out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Test data in LIBSVM format.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value = "global")]
    mode: ModeArg,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Comma-separated worker counts to sweep.
    #[arg(long = "workers-list", default_value = "1,4")]
    workers_list: String,
    /// Known optimal objective; computed by a reference solve when absent.
    #[arg(long = "ref-objective")]
    ref_objective: Option<f64>,
    /// Relative error level reported in the iterations-to-target summary.
    #[arg(long, default_value_t = 1e-2)]
    target: f64,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

/// Resolved inputs of a reproducible run, written next to the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub started_at_unix: u64,
    pub data: PathBuf,
    pub test: Option<PathBuf>,
    pub model_out: PathBuf,
    pub trace_out: PathBuf,
    pub config: TrainConfig,
}

impl RunManifest {
    pub fn path_for(model_out: &Path) -> PathBuf {
        model_out.with_extension("manifest.json")
    }
}

fn env_threads() -> Option<usize> {
    std::env::var("PBM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&t| t > 0)
}

fn env_zero_time() -> bool {
    std::env::var("PBM_TRACE_ZERO_TIME").is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

fn predict_threads() -> usize {
    env_threads().unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |p| p.get()))
}

impl TrainArgs {
    fn to_config(&self) -> Result<TrainConfig, Error> {
        let loss = match self.loss {
            LossArg::Hinge => LossSpec::hinge(self.c)?,
            LossArg::Logistic => LossSpec::logistic(self.c)?,
        };
        let kernel = match self.kernel {
            KernelArg::Gaussian => KernelSpec::gaussian(self.gamma)?,
            KernelArg::Linear => KernelSpec::Linear,
        };
        Ok(TrainConfig {
            loss,
            kernel,
            workers: self.workers,
            partition_mode: match self.partition {
                PartitionArg::Random => PartitionMode::Random,
                PartitionArg::Kmeans => PartitionMode::Kmeans {
                    subsample: self.subsample,
                    iters: 20,
                },
            },
            sigma: self.sigma,
            line_search: self.line_search.map(|l| match l {
                LineSearchArg::Armijo => LineSearchKind::Armijo,
                LineSearchArg::Optimal => LineSearchKind::Optimal,
            }),
            inner_strategy: match self.inner_strategy {
                StrategyArg::Greedy => Strategy::Greedy,
                StrategyArg::Random => Strategy::Random,
                StrategyArg::Cyclic => Strategy::Cyclic,
            },
            inner_epochs: self.inner_budget.0,
            inner_tol: None,
            outer_tol: self.tol,
            max_outer_iters: self.max_iters,
            seed: self.seed,
            cache_bytes: self.cache_mb.saturating_mul(1 << 20),
            qalpha_check_every: None,
            zero_trace_time: env_zero_time(),
            max_parallel: env_threads(),
            comm_timeout_secs: 600,
        })
    }
}

fn io_exit(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IOERR,
        _ => EXIT_ERROR,
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, i32> {
    load_libsvm(path).map_err(|e| {
        eprintln!("pbm: failed to read {}: {e}", path.display());
        io_exit(&e)
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), i32> {
    std::fs::write(path, contents).map_err(|e| {
        eprintln!("pbm: failed to write {}: {e}", path.display());
        EXIT_IOERR
    })
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn run_train(args: &TrainArgs) -> i32 {
    let config = match args.to_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("pbm: {e}");
            return EXIT_ERROR;
        }
    };
    let dataset = match load_dataset(&args.data) {
        Ok(d) => d,
        Err(code) => return code,
    };

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_at_unix: now_unix(),
        data: args.data.clone(),
        test: args.test.clone(),
        model_out: args.model_out.clone(),
        trace_out: args.trace_out.clone(),
        config: config.clone(),
    };
    let manifest_json = match serde_json::to_string_pretty(&manifest) {
        Ok(mut s) => {
            s.push('\n');
            s
        }
        Err(e) => {
            eprintln!("pbm: {e}");
            return EXIT_ERROR;
        }
    };
    if let Err(code) = write_file(&RunManifest::path_for(&args.model_out), &manifest_json) {
        return code;
    }

    let (model, trace) = match train(&config, &dataset) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("pbm: training failed: {e}");
            return io_exit(&e);
        }
    };

    if let Err(e) = model.save(&args.model_out) {
        eprintln!("pbm: failed to write {}: {e}", args.model_out.display());
        return EXIT_IOERR;
    }
    if let Err(code) = write_file(&args.trace_out, &trace.to_csv()) {
        return code;
    }
    report_train(&model, &trace);

    if let Some(test_path) = &args.test {
        let test = match load_dataset(test_path) {
            Ok(d) => d,
            Err(code) => return code,
        };
        let threads = predict_threads();
        match accuracy_with_threads(&model, &test, PredictMode::Global, threads) {
            Ok(acc) => eprintln!("test accuracy (global): {:.4}", acc),
            Err(e) => eprintln!("pbm: test evaluation failed: {e}"),
        }
        if model.centers.is_some() {
            match accuracy_with_threads(&model, &test, PredictMode::Local, threads) {
                Ok(acc) => eprintln!("test accuracy (local):  {:.4}", acc),
                Err(e) => eprintln!("pbm: local evaluation failed: {e}"),
            }
        }
    }

    if trace.converged {
        EXIT_OK
    } else {
        eprintln!(
            "pbm: stopped at the iteration cap with residual {:e}",
            trace.iterations.last().map_or(f64::NAN, |r| r.residual_inf)
        );
        EXIT_MAX_ITERS
    }
}

fn report_train(model: &Model, trace: &TrainTrace) {
    eprintln!(
        "trained: {} iterations, objective {:.6e}, residual {:.3e}, {} support vectors",
        trace.iterations.len(),
        trace.final_objective(),
        trace.iterations.last().map_or(f64::NAN, |r| r.residual_inf),
        model.n_support(),
    );
    eprintln!(
        "communication: {} reduce-scatter bytes, {} line-search/metric bytes, {:.2}s wall",
        trace.reduce_scatter_bytes, trace.scalar_bytes, trace.wall_seconds
    );
}

fn run_predict(args: &PredictArgs) -> i32 {
    let model = match Model::load(&args.model) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("pbm: failed to load model {}: {e}", args.model.display());
            return io_exit(&e);
        }
    };
    let mode = match args.mode {
        ModeArg::Global => PredictMode::Global,
        ModeArg::Local => PredictMode::Local,
    };
    if mode == PredictMode::Local && (model.centers.is_none() || model.local_directions.is_none()) {
        eprintln!("pbm: the model has no kmeans centers; retrain with --partition kmeans");
        return EXIT_DATAERR;
    }
    let test = match load_dataset(&args.test) {
        Ok(d) => d,
        Err(code) => return code,
    };
    let labels = match predict_labels(&model, &test, mode, predict_threads()) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("pbm: prediction failed: {e}");
            return EXIT_ERROR;
        }
    };
    let mut out = String::with_capacity(labels.len() * 3);
    for l in &labels {
        out.push_str(if *l > 0.0 { "1\n" } else { "-1\n" });
    }
    match &args.out {
        Some(path) => {
            if let Err(code) = write_file(path, &out) {
                return code;
            }
        }
        None => print!("{out}"),
    }
    let correct = labels
        .iter()
        .zip(test.labels())
        .filter(|(p, y)| p == y)
        .count();
    eprintln!(
        "accuracy: {:.4} ({}/{})",
        correct as f64 / test.n() as f64,
        correct,
        test.n()
    );
    EXIT_OK
}

fn run_bench(args: &BenchArgs) -> i32 {
    let dataset = match load_dataset(&args.train.data) {
        Ok(d) => d,
        Err(code) => return code,
    };
    let base = match args.train.to_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("pbm: {e}");
            return EXIT_ERROR;
        }
    };
    let workers: Vec<usize> = match args
        .workers_list
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
    {
        Ok(w) if !w.is_empty() => w,
        _ => {
            eprintln!("pbm: --workers-list must be comma-separated positive integers");
            return EXIT_ERROR;
        }
    };

    let f_star = match args.ref_objective {
        Some(f) => f,
        None => {
            // single-block solve with an effectively exact inner solver:
            // the quadratic model is the true objective, so one step lands
            // on the optimum
            let reference = TrainConfig {
                workers: 1,
                inner_epochs: None,
                inner_tol: Some(args.train.tol.min(1e-6) * 0.01),
                outer_tol: args.train.tol.min(1e-6),
                max_outer_iters: 20,
                ..base.clone()
            };
            match train(&reference, &dataset) {
                Ok((_, trace)) => {
                    eprintln!(
                        "reference objective {:.9e} ({} iterations)",
                        trace.final_objective(),
                        trace.iterations.len()
                    );
                    trace.final_objective()
                }
                Err(e) => {
                    eprintln!("pbm: reference solve failed: {e}");
                    return EXIT_ERROR;
                }
            }
        }
    };

    let mut csv = String::from("partition,workers,iter,time_s,objective,rel_err,bytes_comm\n");
    let mut summary = Vec::new();
    for &k in &workers {
        for (name, mode) in [
            ("random", PartitionMode::Random),
            (
                "kmeans",
                PartitionMode::Kmeans {
                    subsample: args.train.subsample,
                    iters: 20,
                },
            ),
        ] {
            let config = TrainConfig {
                workers: k,
                partition_mode: mode,
                ..base.clone()
            };
            let trace = match train(&config, &dataset) {
                Ok((_, t)) => t,
                Err(e) => {
                    eprintln!("pbm: bench run ({name}, k={k}) failed: {e}");
                    return EXIT_ERROR;
                }
            };
            let mut to_target: Option<u64> = None;
            for r in &trace.iterations {
                let rel = (r.objective - f_star) / f_star.abs().max(f64::MIN_POSITIVE);
                if rel <= args.target && to_target.is_none() {
                    to_target = Some(r.iter);
                }
                csv.push_str(&format!(
                    "{name},{k},{},{:.6},{},{},{}\n",
                    r.iter, r.time_s, r.objective, rel, r.bytes_comm
                ));
            }
            summary.push(format!(
                "partition={name} workers={k}: {} iterations to rel_err<={:e}{}",
                to_target.map_or_else(|| "never".into(), |i| i.to_string()),
                args.target,
                if trace.converged {
                    ""
                } else {
                    " (hit max-iters)"
                },
            ));
        }
    }
    if let Err(code) = write_file(&args.out, &csv) {
        return code;
    }
    for line in summary {
        eprintln!("{line}");
    }
    EXIT_OK
}

/// Parses `argv` and runs the requested subcommand; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Train(args) => run_train(&args),
        Command::Predict(args) => run_predict(&args),
        Command::Bench(args) => run_bench(&args),
    }
}

/// Entry point for the `pbm` binary.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(std::env::args_os())
}
