//! The particle ensemble: initialization, the per-batch update loop
//! (assign → refresh → reweight), effective-sample-size monitoring with
//! systematic resampling, and weight-averaged prediction.
//!
//! Each batch touches the particles through one parallel map with exactly
//! two synchronization points: weight normalization/resampling after the
//! per-particle work, and mixture averaging during prediction. Per-particle
//! random streams are derived from (seed, stream id, step), so the schedule
//! of workers cannot change any result.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] use num_traits::Float; // float math in no_std builds
use rand::Rng;

use crate::bandit::{warm_refresh, Arm, ArmPool};
use crate::crp::NiwParams;
use crate::exec::Executor;
use crate::math::logsumexp;
use crate::optimize::OptimizerConfig;
use crate::particle::{Particle, RefreshStats};
use crate::rng::{derive_stream, PURPOSE_RESAMPLE, PURPOSE_STEP};
use crate::{Error, Result};

/// One batch of observations, row-major inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input(String::from("input dimension must be positive")));
        }
        if x.len() != y.len() * dim {
            return Err(Error::Input(format!(
                "{} input coordinates do not form {} points of dimension {}",
                x.len(),
                y.len(),
                dim
            )));
        }
        if y.is_empty() {
            return Err(Error::Input(String::from("batch must contain at least one point")));
        }
        Ok(Self { dim, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Sampler settings. `prior: None` derives a weak NIW prior from the first
/// batch (mean = batch mean, Ψ = batch covariance × ν, ν = D+2, λ = 0.01).
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub num_particles: usize,
    /// Dirichlet-process concentration.
    pub alpha: f64,
    pub prior: Option<NiwParams>,
    pub optimizer: OptimizerConfig,
    /// Per-cluster minibatch size for hyperparameter refreshes; 0 disables.
    pub minibatch: usize,
    /// Resample when ESS < resample_frac × J.
    pub resample_frac: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            num_particles: 16,
            alpha: 2.0,
            prior: None,
            optimizer: OptimizerConfig::default(),
            minibatch: 0,
            resample_frac: 0.5,
            seed: 0,
        }
    }
}

/// What happened during one batch update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Effective sample size 1/Σw² of the normalized weights, before any
    /// resampling this step.
    pub ess: f64,
    pub resampled: bool,
    /// Cluster count per particle, in particle order.
    pub cluster_counts: Vec<usize>,
    /// Experts whose hyperparameters were refreshed, across particles.
    pub refreshed: usize,
    /// Accepted gradient-optimizer iterations across particles (zero in
    /// warm mode unless the pool grows or refinement is on).
    pub optimizer_iterations: usize,
    /// Objective/gradient evaluations across particles.
    pub optimizer_evals: usize,
    /// Arms appended to the pool this step (warm mode only).
    pub new_arms: usize,
    /// Particles that hit a numerical failure and now carry zero weight.
    pub failed_particles: usize,
}

/// ESS = 1/Σ wⱼ² of normalized log weights.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    let doubled: Vec<f64> = log_weights.iter().map(|lw| 2.0 * lw).collect();
    (-logsumexp(&doubled)).exp()
}

/// Slot → particle index map of systematic resampling with offset
/// `u ∈ [0,1)`: one uniform draw, positions (k+u)/J against the cumulative
/// weights. Expected copy count of particle i is exactly J·wᵢ.
pub fn systematic_resample_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let j = weights.len();
    let mut indices = Vec::with_capacity(j);
    let mut cursor = 0usize;
    let mut cum = weights[0];
    for slot in 0..j {
        let pos = (slot as f64 + u) / j as f64;
        // Particle k owns [C_{k-1}, C_k); zero-weight particles own nothing.
        while pos >= cum && cursor + 1 < j {
            cursor += 1;
            cum += weights[cursor];
        }
        indices.push(cursor);
    }
    indices
}

enum RefreshMode<'a> {
    Optimize,
    Warm { pool: &'a ArmPool, allow_new_arm: bool, refine: bool },
}

struct ParticleStepOut {
    refresh: RefreshStats,
    candidates: Vec<Arm>,
    failed: bool,
}

/// Weighted mixture prediction of the whole ensemble. Components are kept
/// so test outputs can be scored by exact mixture log density.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Per test point: (log weight, mean, variance) of every mixture
    /// component across particles and clusters.
    components: Vec<Vec<(f64, f64, f64)>>,
}

impl EnsemblePrediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Log predictive density at test point `point` for outcome `y`.
    pub fn log_density(&self, point: usize, y: f64) -> f64 {
        let terms: Vec<f64> = self.components[point]
            .iter()
            .map(|(lw, m, v)| lw + crate::math::normal_logpdf(y, *m, *v))
            .collect();
        logsumexp(&terms)
    }
}

/// The SMC state: J particles with normalized log weights plus the absorbed
/// data stream (kept for serialization and replay).
#[derive(Debug, Clone)]
pub struct Ensemble {
    particles: Vec<Particle>,
    config: EngineConfig,
    prior: NiwParams,
    step_counter: u64,
    next_stream_id: u64,
    resample_count: u64,
    data_log: Vec<Batch>,
    /// Arms proposed by the particles of the last warm batch, waiting for
    /// the end-of-batch merge into the caller's pool.
    pending_candidates: Vec<Arm>,
}

fn derive_auto_prior(batch: &Batch) -> Result<NiwParams> {
    let d = batch.dim;
    let n = batch.len();
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for k in 0..d {
            mean[k] += batch.x[i * d + k];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let da = batch.x[i * d + a] - mean[a];
            for b in 0..d {
                let db = batch.x[i * d + b] - mean[b];
                cov[(a, b)] += da * db;
            }
        }
    }
    cov /= n as f64;
    for k in 0..d {
        cov[(k, k)] = cov[(k, k)].max(1e-6);
    }
    let nu = d as f64 + 2.0;
    let mut psi = cov * nu;
    // Degenerate first batches (collinear inputs) still need an SPD scale.
    let mut ridge = 1e-9 * psi.diagonal().sum() / d as f64;
    while psi.clone().cholesky().is_none() {
        for k in 0..d {
            psi[(k, k)] += ridge;
        }
        ridge *= 10.0;
    }
    NiwParams::new(mean, 0.01, psi, nu)
}

impl Ensemble {
    /// Initialize from the first batch: every particle samples a partition
    /// from the inputs-only CRP, fits hyperparameters, and takes its total
    /// marginal likelihood as the initial log weight.
    pub fn init<E: Executor>(batch: Batch, config: EngineConfig, exec: &E) -> Result<Self> {
        Self::init_impl(batch, config, RefreshMode::Optimize, exec).map(|(ens, _)| ens)
    }

    /// [`Ensemble::init`] plus the report of the initial batch (refresh
    /// counts, optimizer instrumentation).
    pub fn init_reported<E: Executor>(batch: Batch, config: EngineConfig, exec: &E) -> Result<(Self, StepReport)> {
        Self::init_impl(batch, config, RefreshMode::Optimize, exec)
    }

    /// As [`Ensemble::init`], but hyperparameters come from the arm pool
    /// instead of gradient optimization. Grown arms are merged into `pool`.
    pub fn init_warm<E: Executor>(
        batch: Batch,
        config: EngineConfig,
        pool: &mut ArmPool,
        allow_new_arm: bool,
        refine: bool,
        exec: &E,
    ) -> Result<(Self, StepReport)> {
        if pool.arms.is_empty() {
            return Err(Error::Input(String::from("warm start requires a non-empty arm pool")));
        }
        let snapshot = pool.clone();
        let mode = RefreshMode::Warm { pool: &snapshot, allow_new_arm, refine };
        let (mut ens, mut report) = Self::init_impl(batch, config, mode, exec)?;
        report.new_arms = ens.merge_candidates(pool);
        Ok((ens, report))
    }

    fn init_impl<E: Executor>(
        batch: Batch,
        config: EngineConfig,
        mode: RefreshMode<'_>,
        exec: &E,
    ) -> Result<(Self, StepReport)> {
        if config.num_particles == 0 {
            return Err(Error::Input(String::from("need at least one particle")));
        }
        if !(config.alpha > 0.0) {
            return Err(Error::Input(format!("concentration must be positive, got {}", config.alpha)));
        }
        let prior = match &config.prior {
            Some(p) => {
                if p.dim() != batch.dim {
                    return Err(Error::Input(String::from("prior dimension does not match the data")));
                }
                p.clone()
            }
            None => derive_auto_prior(&batch)?,
        };
        let particles: Vec<Particle> = (0..config.num_particles)
            .map(|i| Particle::new(batch.dim, i as u64))
            .collect();
        let mut ens = Self {
            next_stream_id: config.num_particles as u64,
            particles,
            config,
            prior,
            step_counter: 0,
            resample_count: 0,
            data_log: Vec::new(),
            pending_candidates: Vec::new(),
        };
        let report = ens.run_batch(batch, mode, exec)?;
        Ok((ens, report))
    }

    /// Absorb one batch: per particle assign → refresh → reweight, then
    /// normalize, check ESS, and resample if it fell under the threshold.
    pub fn step<E: Executor>(&mut self, batch: Batch, exec: &E) -> Result<StepReport> {
        self.ensure_ready(&batch)?;
        self.run_batch(batch, RefreshMode::Optimize, exec)
    }

    /// As [`Ensemble::step`], but dirty experts pick the best arm from
    /// `pool` instead of running gradient optimization.
    pub fn step_warm<E: Executor>(
        &mut self,
        batch: Batch,
        pool: &mut ArmPool,
        allow_new_arm: bool,
        refine: bool,
        exec: &E,
    ) -> Result<StepReport> {
        if pool.arms.is_empty() {
            return Err(Error::Input(String::from("warm start requires a non-empty arm pool")));
        }
        self.ensure_ready(&batch)?;
        let snapshot = pool.clone();
        let mode = RefreshMode::Warm { pool: &snapshot, allow_new_arm, refine };
        let mut report = self.run_batch(batch, mode, exec)?;
        report.new_arms = self.merge_candidates(pool);
        Ok(report)
    }

    fn ensure_ready(&self, batch: &Batch) -> Result<()> {
        if self.step_counter == 0 {
            return Err(Error::State(String::from("ensemble is not initialized")));
        }
        if batch.dim != self.dim() {
            return Err(Error::Input(format!(
                "batch dimension {} does not match the ensemble dimension {}",
                batch.dim,
                self.dim()
            )));
        }
        Ok(())
    }

    fn run_batch<E: Executor>(&mut self, batch: Batch, mode: RefreshMode<'_>, exec: &E) -> Result<StepReport> {
        let batch_id = self.step_counter + 1;
        let seed = self.config.seed;
        let alpha = self.config.alpha;
        let minibatch = self.config.minibatch;
        let opts = self.config.optimizer;
        let prior = &self.prior;
        let x = &batch.x;
        let y = &batch.y;
        let mode = &mode;

        let particles = core::mem::take(&mut self.particles);
        let results: Vec<(Particle, ParticleStepOut)> = exec.map_owned(particles, |mut p: Particle| {
            if p.is_failed() {
                return (p, ParticleStepOut { refresh: RefreshStats::default(), candidates: Vec::new(), failed: true });
            }
            let mut rng = derive_stream(seed, p.stream_id, batch_id, PURPOSE_STEP);
            let body = (|| -> Result<(RefreshStats, Vec<Arm>)> {
                p.assign_batch(x, y, batch_id, alpha, prior, &mut rng)?;
                let (refresh, candidates) = match mode {
                    RefreshMode::Optimize => (p.refresh_hyperparams(&opts, minibatch, &mut rng)?, Vec::new()),
                    RefreshMode::Warm { pool, allow_new_arm, refine } => {
                        let out = warm_refresh(&mut p, pool, *allow_new_arm, *refine, &opts, minibatch, &mut rng)?;
                        (out.refresh, out.candidates)
                    }
                };
                p.weight_increment();
                Ok((refresh, candidates))
            })();
            match body {
                Ok((refresh, candidates)) => (p, ParticleStepOut { refresh, candidates, failed: false }),
                Err(_) => {
                    p.mark_failed();
                    (p, ParticleStepOut { refresh: RefreshStats::default(), candidates: Vec::new(), failed: true })
                }
            }
        });

        let mut refreshed = 0;
        let mut iters = 0;
        let mut evals = 0;
        let mut failed = 0;
        let mut candidates: Vec<Arm> = Vec::new();
        self.particles = Vec::with_capacity(results.len());
        for (idx, (p, out)) in results.into_iter().enumerate() {
            refreshed += out.refresh.refreshed;
            iters += out.refresh.iterations;
            evals += out.refresh.evals;
            if out.failed {
                failed += 1;
            }
            for mut arm in out.candidates {
                arm.provenance.particle = idx;
                candidates.push(arm);
            }
            self.particles.push(p);
        }
        self.data_log.push(batch);
        self.step_counter = batch_id;

        self.normalize_weights()?;
        let ess = effective_sample_size(&self.log_weights());
        let resampled = ess < self.config.resample_frac * self.config.num_particles as f64;
        if resampled {
            let mut rng = derive_stream(seed, u64::MAX, batch_id, PURPOSE_RESAMPLE);
            self.resample_with(rng.gen::<f64>());
        }

        self.pending_candidates = candidates;
        Ok(StepReport {
            step: batch_id,
            ess,
            resampled,
            cluster_counts: self.particles.iter().map(|p| p.cluster_count()).collect(),
            refreshed,
            optimizer_iterations: iters,
            optimizer_evals: evals,
            new_arms: 0,
            failed_particles: failed,
        })
    }

    fn merge_candidates(&mut self, pool: &mut ArmPool) -> usize {
        let candidates = core::mem::take(&mut self.pending_candidates);
        let count = candidates.len();
        for arm in candidates {
            pool.push(arm);
        }
        count
    }

    fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }

    fn normalize_weights(&mut self) -> Result<()> {
        let norm = logsumexp(&self.log_weights());
        if !norm.is_finite() {
            return Err(Error::Numerical(String::from("every particle carries zero weight")));
        }
        for p in &mut self.particles {
            p.log_weight -= norm;
        }
        Ok(())
    }

    /// Systematic resampling with offset `u ∈ [0,1)`: duplicated particles
    /// become deep copies with fresh stream ids, and all weights reset to
    /// uniform.
    pub fn resample_with(&mut self, u: f64) {
        let weights: Vec<f64> = self.particles.iter().map(|p| p.log_weight.exp()).collect();
        let indices = systematic_resample_indices(&weights, u);
        let uniform = -(self.config.num_particles as f64).ln();
        let mut next: Vec<Particle> = Vec::with_capacity(indices.len());
        for &i in &indices {
            let mut p = self.particles[i].clone();
            p.stream_id = self.next_stream_id;
            self.next_stream_id += 1;
            p.log_weight = uniform;
            next.push(p);
        }
        self.particles = next;
        self.resample_count += 1;
    }

    /// Resample now, regardless of ESS, using the ensemble's derived stream.
    pub fn resample(&mut self) {
        let mut rng = derive_stream(self.config.seed, u64::MAX, self.step_counter, PURPOSE_RESAMPLE + self.resample_count);
        self.resample_with(rng.gen::<f64>());
    }

    /// Weight-averaged mixture prediction across particles.
    pub fn predict<E: Executor>(&self, test_inputs: &[f64], exec: &E) -> Result<EnsemblePrediction> {
        if self.step_counter == 0 {
            return Err(Error::State(String::from("ensemble is not initialized")));
        }
        if test_inputs.len() % self.dim() != 0 {
            return Err(Error::Input(String::from("test buffer does not match the input dimension")));
        }
        let m = test_inputs.len() / self.dim();
        let alpha = self.config.alpha;
        let prior = &self.prior;
        let alive: Vec<&Particle> = self.particles.iter().filter(|p| !p.is_failed()).collect();
        let per_particle: Vec<Result<Vec<crate::particle::PointPredictive>>> =
            exec.map_owned((0..alive.len()).collect(), |i: usize| alive[i].predict(test_inputs, alpha, prior));

        let mut components: Vec<Vec<(f64, f64, f64)>> = (0..m).map(|_| Vec::new()).collect();
        let mut mean = alloc::vec![0.0; m];
        let mut second = alloc::vec![0.0; m];
        for (p, pred) in alive.iter().zip(per_particle) {
            let pred = pred?;
            let lw = p.log_weight;
            let w = lw.exp();
            for (j, point) in pred.iter().enumerate() {
                mean[j] += w * point.mean();
                second[j] += w * (point.variance() + point.mean() * point.mean());
                for ((cw, cm), cv) in point.weights.iter().zip(&point.means).zip(&point.variances) {
                    components[j].push((lw + cw.ln(), *cm, *cv));
                }
            }
        }
        let variance: Vec<f64> = mean.iter().zip(&second).map(|(m, s)| s - m * m).collect();
        Ok(EnsemblePrediction { mean, variance, components })
    }

    /// Predictive log likelihood (summed) and mean squared error of the
    /// ensemble predictive mean on a test set.
    pub fn score<E: Executor>(&self, test_inputs: &[f64], test_outputs: &[f64], exec: &E) -> Result<(f64, f64)> {
        if test_outputs.is_empty() || test_inputs.len() != test_outputs.len() * self.dim() {
            return Err(Error::Input(String::from("test set is empty or mismatched")));
        }
        let pred = self.predict(test_inputs, exec)?;
        let mut ll = 0.0;
        let mut se = 0.0;
        for (j, y) in test_outputs.iter().enumerate() {
            ll += pred.log_density(j, *y);
            let d = pred.mean[j] - y;
            se += d * d;
        }
        Ok((ll, se / test_outputs.len() as f64))
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn prior(&self) -> &NiwParams {
        &self.prior
    }

    pub fn step_counter(&self) -> u64 {
        self.step_counter
    }

    pub fn next_stream_id(&self) -> u64 {
        self.next_stream_id
    }

    pub fn resample_count(&self) -> u64 {
        self.resample_count
    }

    /// Absorbed batches in arrival order (batch id = position + 1).
    pub fn data_log(&self) -> &[Batch] {
        &self.data_log
    }

    /// Force a particle into the failed state (zero weight, removed at the
    /// next resample). Exposed for failure-path tests and supervisors.
    #[doc(hidden)]
    pub fn fail_particle(&mut self, index: usize) -> Result<()> {
        let p = self
            .particles
            .get_mut(index)
            .ok_or_else(|| Error::Input(format!("no particle at index {index}")))?;
        p.mark_failed();
        self.normalize_weights()
    }

    /// Rebuild an ensemble from serialized state. The prior must be the
    /// resolved one (auto priors are resolved at init time).
    pub fn restore(
        config: EngineConfig,
        prior: NiwParams,
        step_counter: u64,
        next_stream_id: u64,
        resample_count: u64,
        data_log: Vec<Batch>,
        particles: Vec<Particle>,
    ) -> Result<Self> {
        if particles.len() != config.num_particles {
            return Err(Error::Input(format!(
                "{} particles restored but the configuration wants {}",
                particles.len(),
                config.num_particles
            )));
        }
        if step_counter == 0 || data_log.len() != step_counter as usize {
            return Err(Error::Input(String::from("data log does not match the step counter")));
        }
        Ok(Self {
            particles,
            config,
            prior,
            step_counter,
            next_stream_id,
            resample_count,
            data_log,
            pending_candidates: Vec::new(),
        })
    }
}
