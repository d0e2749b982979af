//! Command-line harness for streaming mixture-of-experts GP regression.
//!
//! Subcommands: `synth` (generate piecewise-periodic data), `fit` (batch
//! streaming fit with interleaved test scoring), `track` (one-step-ahead
//! prediction), `harvest-arms` (collect kernel configurations from a fitted
//! model), `warm-fit` (fit with bandit arm selection instead of gradient
//! refreshes), and `score` (evaluate a saved model).
//!
//! Exit codes: 0 on success, 2 for input problems, 3 for numerical failure.

mod config;
mod data;
mod error;
mod model_io;
mod run;
mod synth;
mod threads;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use gpmoe_core::bandit::harvest_arms;
use gpmoe_core::engine::EngineConfig;
use gpmoe_core::optimize::OptimizerConfig;
use gpmoe_core::rng::derive_stream;
use rand::seq::SliceRandom;

use crate::config::FileConfig;
use crate::data::{ingest_csv, write_csv, Dataset, Normalization};
use crate::error::{CliError, Result};
use crate::run::{run_fit, run_score, run_track, write_artifacts, StreamPlan, WarmSpec};
use crate::synth::SyntheticSpec;
use crate::threads::ThreadPoolExecutor;

#[derive(Parser)]
#[command(name = "gpmoe", version, about = "Streaming mixture-of-experts GP regression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic piecewise-periodic regression data as CSV.
    Synth(SynthArgs),
    /// Fit on a training stream, scoring sequential test partitions.
    Fit(FitArgs),
    /// One-step-ahead tracking on a time-ordered stream.
    Track(TrackArgs),
    /// Collect the best particle's kernel configurations into an arm pool.
    HarvestArms(HarvestArgs),
    /// Fit with arm selection replacing gradient hyperparameter refreshes.
    WarmFit(WarmFitArgs),
    /// Score a saved model on a test CSV without updating it.
    Score(ScoreArgs),
}

#[derive(Args)]
struct EngineArgs {
    /// Number of SMC particles (J).
    #[arg(long, default_value_t = 16)]
    particles: usize,
    /// Dirichlet-process concentration.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Per-cluster minibatch size for hyperparameter refreshes (0 = off).
    #[arg(long, default_value_t = 0)]
    minibatch: usize,
    /// Master seed; fixes every random decision of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available cores). Results do not depend on
    /// this.
    #[arg(long)]
    threads: Option<usize>,
    /// Resample when ESS falls below this fraction of J.
    #[arg(long, default_value_t = 0.5)]
    resample_threshold: f64,
    /// Gradient-optimizer iteration cap per refresh.
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// Gradient ∞-norm convergence tolerance.
    #[arg(long, default_value_t = 1e-4)]
    grad_tol: f64,
    /// key=value file supplying any flag; command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SplitMode {
    /// Last fraction is the test set.
    Tail,
    /// Random subset is the test set (seed-derived).
    Random,
}

impl FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tail" => Ok(SplitMode::Tail),
            "random" => Ok(SplitMode::Random),
            other => Err(format!("unknown split mode '{other}'")),
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum OrderMode {
    /// Keep file order (a time-ordered stream).
    Time,
    /// Shuffle the training stream (seed-derived).
    Shuffled,
}

impl FromStr for OrderMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "time" => Ok(OrderMode::Time),
            "shuffled" => Ok(OrderMode::Shuffled),
            other => Err(format!("unknown order mode '{other}'")),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Domain as "lo,hi".
    #[arg(long, default_value = "0,10")]
    domain: String,
    /// Regime boundaries, comma-separated.
    #[arg(long, default_value = "5")]
    breakpoints: String,
    /// One sin(f·π·x) frequency per regime, comma-separated.
    #[arg(long, default_value = "0.6,4")]
    frequencies: String,
    /// Emit points sorted by input (time-ordered stream).
    #[arg(long)]
    sorted: bool,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
    /// key=value file supplying any flag; command line wins.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV (first D columns inputs, last column output).
    #[arg(long, conflicts_with = "data")]
    train: Option<PathBuf>,
    /// Test CSV.
    #[arg(long, conflicts_with = "data", requires = "train")]
    test: Option<PathBuf>,
    /// Single CSV to split into train/test instead of --train/--test.
    #[arg(long)]
    data: Option<PathBuf>,
    /// How --data is split.
    #[arg(long, value_enum, default_value_t = SplitMode::Tail)]
    split: SplitMode,
    /// Test fraction for --data.
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    /// Sequential test partitions (scored before being absorbed).
    #[arg(long, default_value_t = 5)]
    blocks: usize,
    /// Training blocks: first initializes, the rest are update steps.
    #[arg(long, default_value_t = 1)]
    train_blocks: usize,
    /// Training stream order.
    #[arg(long, value_enum, default_value_t = OrderMode::Time)]
    order: OrderMode,
    /// Standardize the output column (stored for de-normalization).
    #[arg(long)]
    normalize: bool,
    /// Directory for metrics.json / predictions.csv / steps.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Save the fitted model here.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct TrackArgs {
    /// Time-ordered CSV stream.
    #[arg(long)]
    data: PathBuf,
    /// Leading fraction used for the initial fit.
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    #[arg(long)]
    normalize: bool,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct HarvestArgs {
    #[arg(long)]
    model_in: PathBuf,
    #[arg(long)]
    arms_out: PathBuf,
    /// Provenance label; defaults to the model file stem.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct WarmFitArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Arm pool to select hyperparameters from.
    #[arg(long)]
    arms_in: PathBuf,
    /// Write the (possibly grown) pool here afterwards.
    #[arg(long)]
    arms_out: Option<PathBuf>,
    /// Let a fresh optimization beat the pool and become a new arm.
    #[arg(long)]
    allow_new_arm: bool,
    /// Gradient-polish the selected arm (reserved; off by default).
    #[arg(long)]
    refine: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model_in: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

fn sub<'a>(matches: &'a ArgMatches) -> &'a ArgMatches {
    matches.subcommand().expect("subcommand is required").1
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// command line > config file > built-in default.
fn merged<T: FromStr + Clone>(m: &ArgMatches, id: &str, cli_value: T, file: &mut FileConfig) -> Result<T> {
    let from_file = file.take::<T>(id)?;
    if from_cli(m, id) {
        return Ok(cli_value);
    }
    Ok(from_file.unwrap_or(cli_value))
}

fn merged_flag(m: &ArgMatches, id: &str, cli_value: bool, file: &mut FileConfig) -> Result<bool> {
    let from_file = file.take_bool(id)?;
    if from_cli(m, id) {
        return Ok(cli_value);
    }
    Ok(from_file.unwrap_or(cli_value))
}

struct EngineSetup {
    config: EngineConfig,
    exec: ThreadPoolExecutor,
}

fn resolve_engine(args: &EngineArgs, m: &ArgMatches, file: &mut FileConfig) -> Result<EngineSetup> {
    let particles = merged(m, "particles", args.particles, file)?;
    let alpha = merged(m, "alpha", args.alpha, file)?;
    let minibatch = merged(m, "minibatch", args.minibatch, file)?;
    let seed = merged(m, "seed", args.seed, file)?;
    let resample_frac = merged(m, "resample-threshold", args.resample_threshold, file)?;
    let max_iters = merged(m, "max-iters", args.max_iters, file)?;
    let grad_tol = merged(m, "grad-tol", args.grad_tol, file)?;
    let threads = match (from_cli(m, "threads"), args.threads, file.take::<usize>("threads")?) {
        (true, Some(t), _) => t,
        (false, _, Some(t)) => t,
        _ => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    if particles == 0 {
        return Err(CliError::input("--particles must be at least 1"));
    }
    Ok(EngineSetup {
        config: EngineConfig {
            num_particles: particles,
            alpha,
            prior: None,
            optimizer: OptimizerConfig { max_iters, grad_tol },
            minibatch,
            resample_frac,
            seed,
        },
        exec: ThreadPoolExecutor::new(threads),
    })
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|_| CliError::input(format!("cannot parse {what} '{f}'"))))
        .collect()
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let m = sub(matches);
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args, m),
        Cmd::Fit(args) => cmd_fit(args, m, None),
        Cmd::Track(args) => cmd_track(args, m),
        Cmd::HarvestArms(args) => cmd_harvest(args),
        Cmd::WarmFit(args) => {
            let warm = WarmOptions { arms_in: args.arms_in, arms_out: args.arms_out, allow_new_arm: args.allow_new_arm, refine: args.refine };
            cmd_fit(args.fit, m, Some(warm))
        }
        Cmd::Score(args) => cmd_score(args),
    }
}

fn cmd_synth(args: SynthArgs, m: &ArgMatches) -> Result<()> {
    let mut file = load_file_config(&args.config)?;
    let domain = parse_list(&merged(m, "domain", args.domain.clone(), &mut file)?, "domain bound")?;
    if domain.len() != 2 {
        return Err(CliError::input("--domain must be 'lo,hi'"));
    }
    let spec = SyntheticSpec {
        n_train: merged(m, "n-train", args.n_train, &mut file)?,
        n_test: merged(m, "n-test", args.n_test, &mut file)?,
        noise_sd: merged(m, "noise-sd", args.noise_sd, &mut file)?,
        seed: merged(m, "seed", args.seed, &mut file)?,
        domain: (domain[0], domain[1]),
        breakpoints: parse_list(&merged(m, "breakpoints", args.breakpoints.clone(), &mut file)?, "breakpoint")?,
        frequencies: parse_list(&merged(m, "frequencies", args.frequencies.clone(), &mut file)?, "frequency")?,
        sorted: merged_flag(m, "sorted", args.sorted, &mut file)?,
    };
    file.finish()?;
    let (train, test) = spec.generate()?;
    write_csv(&args.out_train, &train)?;
    write_csv(&args.out_test, &test)?;
    eprintln!(
        "wrote {} training rows to {} and {} test rows to {}",
        train.len(),
        args.out_train.display(),
        test.len(),
        args.out_test.display()
    );
    Ok(())
}

struct WarmOptions {
    arms_in: PathBuf,
    arms_out: Option<PathBuf>,
    allow_new_arm: bool,
    refine: bool,
}

fn split_dataset(data: &Dataset, mode: SplitMode, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CliError::input("--test-fraction must be strictly between 0 and 1"));
    }
    let n_test = ((data.len() as f64 * fraction) as usize).clamp(1, data.len() - 1);
    match mode {
        SplitMode::Tail => {
            let cut = data.len() - n_test;
            Ok((data.slice(0, cut), data.slice(cut, data.len())))
        }
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            let mut rng = derive_stream(seed, 106, 0, 0);
            idx.shuffle(&mut rng);
            let mut test_mask = vec![false; data.len()];
            for &i in idx.iter().take(n_test) {
                test_mask[i] = true;
            }
            let mut take = |want: bool| {
                let mut x = Vec::new();
                let mut y = Vec::new();
                for i in 0..data.len() {
                    if test_mask[i] == want {
                        x.extend_from_slice(&data.x[i * data.dim..(i + 1) * data.dim]);
                        y.push(data.y[i]);
                    }
                }
                Dataset { dim: data.dim, x, y }
            };
            Ok((take(false), take(true)))
        }
    }
}

fn cmd_fit(args: FitArgs, m: &ArgMatches, warm: Option<WarmOptions>) -> Result<()> {
    let mut file = load_file_config(&args.engine.config)?;
    let setup = resolve_engine(&args.engine, m, &mut file)?;
    let normalize = merged_flag(m, "normalize", args.normalize, &mut file)?;
    let plan = StreamPlan {
        train_blocks: merged(m, "train-blocks", args.train_blocks, &mut file)?,
        test_blocks: merged(m, "blocks", args.blocks, &mut file)?,
        shuffle: match merged(m, "order", String::from(if args.order == OrderMode::Shuffled { "shuffled" } else { "time" }), &mut file)?.parse::<OrderMode>() {
            Ok(OrderMode::Shuffled) => true,
            Ok(OrderMode::Time) => false,
            Err(e) => return Err(CliError::input(e)),
        },
    };
    let split_mode = match merged(
        m,
        "split",
        String::from(if args.split == SplitMode::Random { "random" } else { "tail" }),
        &mut file,
    )?
    .parse::<SplitMode>()
    {
        Ok(mode) => mode,
        Err(e) => return Err(CliError::input(e)),
    };
    let test_fraction = merged(m, "test-fraction", args.test_fraction, &mut file)?;
    file.finish()?;

    let (train, test, norm) = match (&args.train, &args.test, &args.data) {
        (Some(tr), Some(te), None) => {
            let (mut train, norm, _) = ingest_csv(tr, normalize)?;
            let (mut test, _, _) = ingest_csv(te, false)?;
            if test.dim != train.dim {
                return Err(CliError::input("train and test dimensions differ"));
            }
            if let Some(n) = &norm {
                for y in &mut test.y {
                    *y = n.apply(*y);
                }
            }
            let _ = &mut train;
            (train, test, norm)
        }
        (None, None, Some(d)) => {
            let (all, norm, _) = ingest_csv(d, normalize)?;
            let (train, test) = split_dataset(&all, split_mode, test_fraction, setup.config.seed)?;
            (train, test, norm)
        }
        _ => return Err(CliError::input("provide either --train and --test, or --data")),
    };

    let (ens, record, pool) = match warm {
        None => {
            let (ens, record) = run_fit(&train, &test, &plan, &setup.config, None, norm, &setup.exec)?;
            (ens, record, None)
        }
        Some(w) => {
            let mut pool = model_io::load_arms(&w.arms_in)?;
            let (ens, record) = run_fit(
                &train,
                &test,
                &plan,
                &setup.config,
                Some(WarmSpec { pool: &mut pool, allow_new_arm: w.allow_new_arm, refine: w.refine }),
                norm,
                &setup.exec,
            )?;
            if let Some(out) = &w.arms_out {
                model_io::save_arms(out, &pool)?;
            }
            (ens, record, Some(pool))
        }
    };

    write_artifacts(&args.out_dir, &record, &setup.config)?;
    if let Some(path) = &args.model_out {
        model_io::save_model(path, &ens, record.normalization)?;
    }
    eprintln!(
        "{}: pred_ll={:.4} pred_mse={:.4} wall={:.2}s optimizer_iterations={}{}",
        record.command,
        record.pred_ll,
        record.pred_mse,
        record.wall_time_s,
        record.optimizer_iterations,
        pool.map(|p| format!(" arms={}", p.arms.len())).unwrap_or_default()
    );
    Ok(())
}

fn cmd_track(args: TrackArgs, m: &ArgMatches) -> Result<()> {
    let mut file = load_file_config(&args.engine.config)?;
    let setup = resolve_engine(&args.engine, m, &mut file)?;
    let normalize = merged_flag(m, "normalize", args.normalize, &mut file)?;
    let split_fraction = merged(m, "split-fraction", args.split_fraction, &mut file)?;
    file.finish()?;

    let (data, norm, _) = ingest_csv(&args.data, normalize)?;
    let (ens, record) = run_track(&data, split_fraction, &setup.config, norm, &setup.exec)?;
    write_artifacts(&args.out_dir, &record, &setup.config)?;
    if let Some(path) = &args.model_out {
        model_io::save_model(path, &ens, record.normalization)?;
    }
    eprintln!(
        "track: one-step pred_ll={:.4} pred_mse={:.4} over {} points, wall={:.2}s",
        record.pred_ll, record.pred_mse, record.n_test, record.wall_time_s
    );
    Ok(())
}

fn cmd_harvest(args: HarvestArgs) -> Result<()> {
    let (ens, _) = model_io::load_model(&args.model_in)?;
    let run_id = args.run_id.clone().unwrap_or_else(|| {
        Path::new(&args.model_in)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| String::from("model"))
    });
    let pool = harvest_arms(&ens, &run_id)?;
    model_io::save_arms(&args.arms_out, &pool)?;
    eprintln!("harvested {} arm(s) from '{run_id}' into {}", pool.arms.len(), args.arms_out.display());
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let (ens, norm) = model_io::load_model(&args.model_in)?;
    let (mut test, _, _) = ingest_csv(&args.test, false)?;
    if test.dim != ens.dim() {
        return Err(CliError::input("test dimension does not match the model"));
    }
    if let Some(n) = &norm {
        for y in &mut test.y {
            *y = n.apply(*y);
        }
    }
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let exec = ThreadPoolExecutor::new(threads);
    let record = run_score(&ens, &test, norm, &exec)?;
    write_artifacts(&args.out_dir, &record, ens.config())?;
    eprintln!("score: pred_ll={:.4} pred_mse={:.4} on {} points", record.pred_ll, record.pred_mse, record.n_test);
    Ok(())
}
