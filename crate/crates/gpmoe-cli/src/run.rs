//! Streaming run protocols and their artifacts.
//!
//! `fit` initializes on the training stream (optionally in blocks), then
//! walks the test stream in sequential partitions, scoring each partition
//! before absorbing it — predictions always happen strictly before the true
//! values enter the model. `track` is the one-step-ahead special case with
//! singleton batches. Warm variants swap gradient refreshes for arm
//! selection against a pool.
//!
//! Artifacts: `metrics.json` (scores, wall time, run configuration),
//! `predictions.csv` (one row per scored point), `steps.csv` (per-step ESS,
//! resampling, refresh counters).

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use gpmoe_core::bandit::ArmPool;
use gpmoe_core::engine::{Batch, EngineConfig, Ensemble, StepReport};
use gpmoe_core::exec::Executor;
use gpmoe_core::rng::derive_stream;

use crate::data::{Dataset, Normalization};
use crate::error::{CliError, Result};
use crate::model_io::atomic_write;

const STREAM_SHUFFLE: u64 = 105;

/// How the training and test streams are carved into sequential batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamPlan {
    /// Training blocks: the first initializes, the rest are update steps.
    pub train_blocks: usize,
    /// Test partitions scored-then-absorbed in order.
    pub test_blocks: usize,
    /// Shuffle the training stream before blocking (seed-derived).
    pub shuffle: bool,
}

impl Default for StreamPlan {
    fn default() -> Self {
        Self { train_blocks: 1, test_blocks: 5, shuffle: false }
    }
}

/// One scored point: inputs, predictive moments, truth, and log density.
#[derive(Debug, Clone, PartialEq)]
pub struct PredRow {
    pub x: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub y: f64,
    pub log_density: f64,
}

/// Everything a run leaves behind (besides the fitted ensemble).
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub reports: Vec<StepReport>,
    pub predictions: Vec<PredRow>,
    pub pred_ll: f64,
    pub pred_mse: f64,
    pub wall_time_s: f64,
    pub optimizer_iterations: usize,
    pub optimizer_evals: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub normalization: Option<Normalization>,
    pub per_block: Vec<(f64, f64)>,
}

impl RunRecord {
    fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            reports: Vec::new(),
            predictions: Vec::new(),
            pred_ll: 0.0,
            pred_mse: 0.0,
            wall_time_s: 0.0,
            optimizer_iterations: 0,
            optimizer_evals: 0,
            n_train: 0,
            n_test: 0,
            normalization: None,
            per_block: Vec::new(),
        }
    }

    fn absorb_report(&mut self, report: &StepReport) {
        self.optimizer_iterations += report.optimizer_iterations;
        self.optimizer_evals += report.optimizer_evals;
        self.reports.push(report.clone());
    }

    /// Metrics recomputed from the recorded rows (scoring has no state
    /// beyond them).
    fn finalize_scores(&mut self) {
        self.pred_ll = self.predictions.iter().map(|r| r.log_density).sum();
        self.pred_mse = if self.predictions.is_empty() {
            0.0
        } else {
            self.predictions.iter().map(|r| (r.mean - r.y) * (r.mean - r.y)).sum::<f64>()
                / self.predictions.len() as f64
        };
    }
}

/// Warm-start settings threaded through a run.
pub struct WarmSpec<'a> {
    pub pool: &'a mut ArmPool,
    pub allow_new_arm: bool,
    pub refine: bool,
}

fn shuffled(train: &Dataset, seed: u64) -> Dataset {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = derive_stream(seed, STREAM_SHUFFLE, 0, 0);
    idx.shuffle(&mut rng);
    let mut x = Vec::with_capacity(train.x.len());
    let mut y = Vec::with_capacity(train.y.len());
    for i in idx {
        x.extend_from_slice(&train.x[i * train.dim..(i + 1) * train.dim]);
        y.push(train.y[i]);
    }
    Dataset { dim: train.dim, x, y }
}

fn as_batch(d: &Dataset) -> Result<Batch> {
    Batch::new(d.dim, d.x.clone(), d.y.clone()).map_err(CliError::from)
}

fn score_block<E: Executor>(
    ens: &Ensemble,
    block: &Dataset,
    exec: &E,
    record: &mut RunRecord,
) -> Result<()> {
    let pred = ens.predict(&block.x, exec)?;
    let mut ll = 0.0;
    let mut se = 0.0;
    for i in 0..block.len() {
        let ld = pred.log_density(i, block.y[i]);
        ll += ld;
        se += (pred.mean[i] - block.y[i]) * (pred.mean[i] - block.y[i]);
        record.predictions.push(PredRow {
            x: block.x[i * block.dim..(i + 1) * block.dim].to_vec(),
            mean: pred.mean[i],
            variance: pred.variance[i],
            y: block.y[i],
            log_density: ld,
        });
    }
    record.per_block.push((ll, se / block.len() as f64));
    Ok(())
}

/// Initialize on the training stream and walk the test stream
/// predict-then-absorb. `warm` switches every hyperparameter refresh to arm
/// selection.
pub fn run_fit<E: Executor>(
    train: &Dataset,
    test: &Dataset,
    plan: &StreamPlan,
    config: &EngineConfig,
    mut warm: Option<WarmSpec<'_>>,
    normalization: Option<Normalization>,
    exec: &E,
) -> Result<(Ensemble, RunRecord)> {
    if train.is_empty() || test.is_empty() {
        return Err(CliError::input("fit needs non-empty training and test sets"));
    }
    let started = Instant::now();
    let command = if warm.is_some() { "warm-fit" } else { "fit" };
    let mut record = RunRecord::new(command, config.seed);
    record.n_train = train.len();
    record.n_test = test.len();
    record.normalization = normalization;

    let ordered;
    let train = if plan.shuffle {
        ordered = shuffled(train, config.seed);
        &ordered
    } else {
        train
    };

    let train_parts = train.blocks(plan.train_blocks.max(1));
    let mut ens = {
        let first = as_batch(&train_parts[0])?;
        let (ens, report) = match &mut warm {
            None => Ensemble::init_reported(first, config.clone(), exec)?,
            Some(w) => Ensemble::init_warm(first, config.clone(), w.pool, w.allow_new_arm, w.refine, exec)?,
        };
        record.absorb_report(&report);
        ens
    };
    for part in &train_parts[1..] {
        let batch = as_batch(part)?;
        let report = match &mut warm {
            None => ens.step(batch, exec)?,
            Some(w) => ens.step_warm(batch, w.pool, w.allow_new_arm, w.refine, exec)?,
        };
        record.absorb_report(&report);
    }

    for part in &test.blocks(plan.test_blocks.max(1)) {
        score_block(&ens, part, exec, &mut record)?;
        let batch = as_batch(part)?;
        let report = match &mut warm {
            None => ens.step(batch, exec)?,
            Some(w) => ens.step_warm(batch, w.pool, w.allow_new_arm, w.refine, exec)?,
        };
        record.absorb_report(&report);
    }

    record.finalize_scores();
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((ens, record))
}

/// One-step-ahead tracking: train on the leading fraction of a time-ordered
/// stream, then alternate predict / absorb for every remaining point.
pub fn run_track<E: Executor>(
    data: &Dataset,
    split_fraction: f64,
    config: &EngineConfig,
    normalization: Option<Normalization>,
    exec: &E,
) -> Result<(Ensemble, RunRecord)> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(CliError::input("split-fraction must be strictly between 0 and 1"));
    }
    if data.len() < 2 {
        return Err(CliError::input("tracking needs at least two points"));
    }
    if !data.is_time_ordered() {
        return Err(CliError::input("tracking input must be time-ordered by its first column"));
    }
    let started = Instant::now();
    let mut record = RunRecord::new("track", config.seed);
    record.normalization = normalization;

    let head = ((data.len() as f64 * split_fraction) as usize).clamp(1, data.len() - 1);
    record.n_train = head;
    record.n_test = data.len() - head;

    let (mut ens, report) = Ensemble::init_reported(as_batch(&data.slice(0, head))?, config.clone(), exec)?;
    record.absorb_report(&report);

    for i in head..data.len() {
        let point = data.slice(i, i + 1);
        score_block(&ens, &point, exec, &mut record)?;
        let report = ens.step(as_batch(&point)?, exec)?;
        record.absorb_report(&report);
    }

    record.finalize_scores();
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok((ens, record))
}

/// Score a fitted ensemble on a held-out set without updating it.
pub fn run_score<E: Executor>(
    ens: &Ensemble,
    test: &Dataset,
    normalization: Option<Normalization>,
    exec: &E,
) -> Result<RunRecord> {
    if test.is_empty() {
        return Err(CliError::input("score needs a non-empty test set"));
    }
    let started = Instant::now();
    let mut record = RunRecord::new("score", ens.config().seed);
    record.n_test = test.len();
    record.n_train = ens.data_log().iter().map(|b| b.len()).sum();
    record.normalization = normalization;
    score_block(ens, test, exec, &mut record)?;
    record.finalize_scores();
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok(record)
}

#[derive(serde::Serialize)]
struct MetricsDoc<'a> {
    command: &'a str,
    seed: u64,
    n_train: usize,
    n_test: usize,
    particles: usize,
    alpha: f64,
    minibatch: usize,
    resample_threshold: f64,
    max_iters: usize,
    grad_tol: f64,
    pred_ll: f64,
    pred_mse: f64,
    optimizer_iterations: usize,
    optimizer_evals: usize,
    normalization: Option<Normalization>,
    per_block_pred_ll: Vec<f64>,
    per_block_pred_mse: Vec<f64>,
    wall_time_s: f64,
}

/// Write `metrics.json`, `predictions.csv`, and `steps.csv` into `dir`.
/// Everything except the wall-time field is a pure function of
/// (seed, configuration, data).
pub fn write_artifacts(dir: &Path, record: &RunRecord, config: &EngineConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;

    let metrics = MetricsDoc {
        command: &record.command,
        seed: record.seed,
        n_train: record.n_train,
        n_test: record.n_test,
        particles: config.num_particles,
        alpha: config.alpha,
        minibatch: config.minibatch,
        resample_threshold: config.resample_frac,
        max_iters: config.optimizer.max_iters,
        grad_tol: config.optimizer.grad_tol,
        pred_ll: record.pred_ll,
        pred_mse: record.pred_mse,
        optimizer_iterations: record.optimizer_iterations,
        optimizer_evals: record.optimizer_evals,
        normalization: record.normalization,
        per_block_pred_ll: record.per_block.iter().map(|b| b.0).collect(),
        per_block_pred_mse: record.per_block.iter().map(|b| b.1).collect(),
        wall_time_s: record.wall_time_s,
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CliError::input(format!("serializing metrics: {e}")))?;
    atomic_write(&dir.join("metrics.json"), format!("{json}\n").as_bytes())?;

    let dim = record.predictions.first().map_or(1, |r| r.x.len());
    let mut csv = String::new();
    for d in 0..dim {
        let _ = write!(csv, "x{d},");
    }
    csv.push_str("mean,variance,y,log_density\n");
    for row in &record.predictions {
        for v in &row.x {
            let _ = write!(csv, "{v},");
        }
        let _ = writeln!(csv, "{},{},{},{}", row.mean, row.variance, row.y, row.log_density);
    }
    atomic_write(&dir.join("predictions.csv"), csv.as_bytes())?;

    let mut steps = String::from(
        "step,ess,resampled,refreshed,optimizer_iterations,optimizer_evals,new_arms,failed_particles,cluster_counts\n",
    );
    for r in &record.reports {
        let counts: Vec<String> = r.cluster_counts.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            steps,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.ess,
            r.resampled,
            r.refreshed,
            r.optimizer_iterations,
            r.optimizer_evals,
            r.new_arms,
            r.failed_particles,
            counts.join(" ")
        );
    }
    atomic_write(&dir.join("steps.csv"), steps.as_bytes())
}
