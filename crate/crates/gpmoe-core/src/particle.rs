//! One sampler hypothesis: a partition of everything absorbed so far, a GP
//! expert per cluster, cached per-expert marginal likelihoods, and the
//! running log importance weight.
//!
//! A particle is owned by one worker at a time. All randomness comes in
//! through the caller-supplied stream, so a particle's evolution is a pure
//! function of (data, concentration, prior, stream).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] use num_traits::Float; // float math in no_std builds
use rand::Rng;

use crate::crp::{crp_assignment_logprobs, sample_assignment, ClusterStats, NiwParams};
use crate::kernel::{GpDataView, GpFactor, KernelHyperparams};
use crate::math::{logsumexp, normal_logpdf};
use crate::optimize::{optimize_hyperparams, OptimizerConfig};
use crate::{Error, Result};

/// One append-only entry of the assignment history: which cluster got point
/// `index` of batch `batch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub batch: u64,
    pub index: usize,
    pub cluster: usize,
}

/// A cluster's GP expert: membership statistics, member data, kernel
/// hyperparameters, and the cached (tempered) log marginal likelihood.
#[derive(Debug, Clone)]
pub struct ExpertState {
    pub stats: ClusterStats,
    pub theta: KernelHyperparams,
    /// Tempered log marginal likelihood of the member data under `theta`,
    /// valid whenever `dirty` is false.
    pub cached_lml: f64,
    /// Set when points arrived after the last hyperparameter update.
    pub dirty: bool,
    /// False until the first hyperparameter update; the first update
    /// re-derives its starting point from the full membership.
    optimized: bool,
    dim: usize,
    inputs: Vec<f64>,
    outputs: Vec<f64>,
    factor: Option<GpFactor>,
}

impl ExpertState {
    fn new(dim: usize) -> Self {
        Self {
            stats: ClusterStats::new(dim),
            theta: KernelHyperparams { log_lengthscale: 0.0, log_signal_var: 0.0, log_noise_var: 0.0 },
            cached_lml: 0.0,
            dirty: true,
            optimized: false,
            dim,
            inputs: Vec::new(),
            outputs: Vec::new(),
            factor: None,
        }
    }

    fn push(&mut self, x: &[f64], y: f64) {
        self.stats.add(x);
        self.inputs.extend_from_slice(x);
        self.outputs.push(y);
        self.dirty = true;
        self.factor = None;
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// View of the full member data, untempered.
    pub fn data_view(&self) -> GpDataView<'_> {
        GpDataView { dim: self.dim, inputs: &self.inputs, outputs: &self.outputs, temper_power: 1.0 }
    }

    /// Member data for a hyperparameter update: the full set, or a fresh
    /// uniform subsample tempered by count/B when the cluster outgrew the
    /// minibatch size.
    pub(crate) fn refresh_data<R: Rng>(&self, minibatch: usize, rng: &mut R) -> RefreshData {
        let n = self.len();
        if minibatch == 0 || n <= minibatch {
            return RefreshData { inputs: None, outputs: None, temper: 1.0 };
        }
        let picks = rand::seq::index::sample(rng, n, minibatch);
        let mut xs = Vec::with_capacity(minibatch * self.dim);
        let mut ys = Vec::with_capacity(minibatch);
        for i in picks.iter() {
            xs.extend_from_slice(&self.inputs[i * self.dim..(i + 1) * self.dim]);
            ys.push(self.outputs[i]);
        }
        RefreshData { inputs: Some(xs), outputs: Some(ys), temper: n as f64 / minibatch as f64 }
    }

    pub(crate) fn rebuild_factor(&mut self) -> Result<()> {
        self.factor = Some(GpFactor::fit(&self.data_view(), &self.theta)?);
        Ok(())
    }

    pub(crate) fn starting_theta(&self) -> KernelHyperparams {
        if self.optimized {
            self.theta
        } else {
            KernelHyperparams::default_for_data(self.dim, &self.inputs, &self.outputs)
        }
    }

    pub(crate) fn adopt(&mut self, theta: KernelHyperparams, cached_lml: f64) -> Result<()> {
        self.theta = theta;
        self.cached_lml = cached_lml;
        self.dirty = false;
        self.optimized = true;
        self.rebuild_factor()
    }

    /// Posterior predictive at the test points, reusing the cached
    /// factorization when it is current.
    pub fn predict(&self, test_inputs: &[f64]) -> Result<crate::kernel::PredictiveGaussian> {
        match &self.factor {
            Some(f) => f.predict(self.dim, &self.inputs, &self.theta, test_inputs),
            None => {
                let f = GpFactor::fit(&self.data_view(), &self.theta)?;
                f.predict(self.dim, &self.inputs, &self.theta, test_inputs)
            }
        }
    }
}

pub(crate) struct RefreshData {
    inputs: Option<Vec<f64>>,
    outputs: Option<Vec<f64>>,
    temper: f64,
}

impl RefreshData {
    pub(crate) fn view<'a>(&'a self, expert: &'a ExpertState) -> GpDataView<'a> {
        GpDataView {
            dim: expert.dim,
            inputs: self.inputs.as_deref().unwrap_or(&expert.inputs),
            outputs: self.outputs.as_deref().unwrap_or(&expert.outputs),
            temper_power: self.temper,
        }
    }
}

/// Counters reported by a hyperparameter refresh pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefreshStats {
    /// Experts whose hyperparameters were updated.
    pub refreshed: usize,
    /// Accepted gradient-optimizer iterations across those updates.
    pub iterations: usize,
    /// Objective/gradient evaluations across those updates.
    pub evals: usize,
}

/// Mixture predictive at a single test point: per-component weights, means,
/// and variances (components are the experts plus one unopened-cluster slot).
#[derive(Debug, Clone, PartialEq)]
pub struct PointPredictive {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl PointPredictive {
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    /// Marginal variance by the law of total variance.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let second: f64 = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w * (v + m * m))
            .sum();
        second - mean * mean
    }

    pub fn log_density(&self, y: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| w.ln() + normal_logpdf(y, *m, *v))
            .collect();
        logsumexp(&terms)
    }
}

/// One SMC hypothesis over partitions and per-cluster hyperparameters.
#[derive(Debug, Clone)]
pub struct Particle {
    pub experts: BTreeMap<usize, ExpertState>,
    pub log_weight: f64,
    pub assignment_log: Vec<Assignment>,
    pub stream_id: u64,
    next_cluster_id: usize,
    prev_total_lml: f64,
    failed: bool,
    dim: usize,
    out_count: usize,
    out_sum: f64,
    out_sumsq: f64,
}

impl Particle {
    pub fn new(dim: usize, stream_id: u64) -> Self {
        Self {
            experts: BTreeMap::new(),
            log_weight: 0.0,
            assignment_log: Vec::new(),
            stream_id,
            next_cluster_id: 0,
            prev_total_lml: 0.0,
            failed: false,
            dim,
            out_count: 0,
            out_sum: 0.0,
            out_sumsq: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cluster_count(&self) -> usize {
        self.experts.len()
    }

    pub fn total_points(&self) -> usize {
        self.experts.values().map(|e| e.len()).sum()
    }

    pub fn is_failed(&self) -> bool {
        self.failed
    }

    pub(crate) fn mark_failed(&mut self) {
        self.failed = true;
        self.log_weight = f64::NEG_INFINITY;
    }

    /// Sum of cached per-expert log marginal likelihoods.
    pub fn total_cached_lml(&self) -> f64 {
        self.experts.values().map(|e| e.cached_lml).sum()
    }

    /// Total cached log marginal likelihood recorded at the end of the
    /// previous step (the baseline the next weight increment diffs against).
    pub fn prev_total_lml(&self) -> f64 {
        self.prev_total_lml
    }

    fn stats_refs(&self) -> Vec<&ClusterStats> {
        self.experts.values().map(|e| &e.stats).collect()
    }

    fn cluster_ids(&self) -> Vec<usize> {
        self.experts.keys().copied().collect()
    }

    /// Sample a cluster for every point of the batch in order, creating new
    /// clusters as the CRP dictates, and absorb the points. Returns the
    /// chosen cluster ids.
    pub fn assign_batch<R: Rng>(
        &mut self,
        x: &[f64],
        y: &[f64],
        batch_id: u64,
        alpha: f64,
        prior: &NiwParams,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::Input(String::from("batch must contain at least one point")));
        }
        if x.len() != y.len() * self.dim {
            return Err(Error::Input(format!(
                "batch of {} coordinates does not form {} points of dimension {}",
                x.len(),
                y.len(),
                self.dim
            )));
        }
        if prior.dim() != self.dim {
            return Err(Error::Input(String::from("prior dimension does not match particle dimension")));
        }
        let mut chosen = Vec::with_capacity(y.len());
        for (i, yi) in y.iter().enumerate() {
            let xi = &x[i * self.dim..(i + 1) * self.dim];
            let ids = self.cluster_ids();
            let logprobs = crp_assignment_logprobs(xi, &self.stats_refs(), alpha, prior)?;
            let slot = sample_assignment(&logprobs, rng);
            let cluster = if slot < ids.len() {
                ids[slot]
            } else {
                let id = self.next_cluster_id;
                self.next_cluster_id += 1;
                self.experts.insert(id, ExpertState::new(self.dim));
                id
            };
            let expert = self.experts.get_mut(&cluster).expect("chosen cluster exists");
            expert.push(xi, *yi);
            self.out_count += 1;
            self.out_sum += *yi;
            self.out_sumsq += *yi * *yi;
            self.assignment_log.push(Assignment { batch: batch_id, index: i, cluster });
            chosen.push(cluster);
        }
        Ok(chosen)
    }

    /// Gradient-optimize the hyperparameters of every dirty expert from its
    /// current setting (or the data-driven default on its first update),
    /// refreshing the cached marginal likelihoods.
    pub fn refresh_hyperparams<R: Rng>(
        &mut self,
        opts: &OptimizerConfig,
        minibatch: usize,
        rng: &mut R,
    ) -> Result<RefreshStats> {
        let mut out = RefreshStats::default();
        let ids = self.cluster_ids();
        for id in ids {
            let expert = self.experts.get_mut(&id).expect("cluster id from key set");
            if !expert.dirty {
                continue;
            }
            let start = expert.starting_theta();
            let data = expert.refresh_data(minibatch, rng);
            let outcome = optimize_hyperparams(&data.view(expert), &start, opts)?;
            expert.adopt(outcome.theta, outcome.value)?;
            out.refreshed += 1;
            out.iterations += outcome.iterations;
            out.evals += outcome.evals;
        }
        Ok(out)
    }

    /// Difference between the current and previously recorded totals of the
    /// cached log marginal likelihoods; folds it into the log weight.
    pub fn weight_increment(&mut self) -> f64 {
        let total = self.total_cached_lml();
        let inc = total - self.prev_total_lml;
        self.prev_total_lml = total;
        self.log_weight += inc;
        inc
    }

    /// New-cluster predictive component: a zero-mean GP prior under the
    /// default hyperparameters implied by everything this particle has seen.
    fn fresh_cluster_variance(&self) -> f64 {
        let var_y = if self.out_count == 0 {
            0.0
        } else {
            let n = self.out_count as f64;
            let mean = self.out_sum / n;
            (self.out_sumsq / n - mean * mean).max(0.0)
        };
        var_y.max(1e-6) + (0.1 * var_y).max(1e-8)
    }

    /// Per-point predictive mixture: assignment probabilities over existing
    /// clusters plus the unopened-cluster slot, Gaussian components from the
    /// per-expert GP posteriors.
    pub fn predict(&self, test_inputs: &[f64], alpha: f64, prior: &NiwParams) -> Result<Vec<PointPredictive>> {
        if self.experts.is_empty() {
            return Err(Error::State(String::from("particle has not absorbed any data")));
        }
        if test_inputs.len() % self.dim != 0 {
            return Err(Error::Input(format!(
                "test buffer of {} coordinates is not a multiple of dimension {}",
                test_inputs.len(),
                self.dim
            )));
        }
        let m = test_inputs.len() / self.dim;
        let per_expert: Vec<crate::kernel::PredictiveGaussian> = self
            .experts
            .values()
            .map(|e| e.predict(test_inputs))
            .collect::<Result<_>>()?;
        let stats = self.stats_refs();
        let fresh_var = self.fresh_cluster_variance();
        let mut points = Vec::with_capacity(m);
        for j in 0..m {
            let xj = &test_inputs[j * self.dim..(j + 1) * self.dim];
            let logprobs = crp_assignment_logprobs(xj, &stats, alpha, prior)?;
            let weights: Vec<f64> = logprobs.iter().map(|lp| lp.exp()).collect();
            let mut means: Vec<f64> = per_expert.iter().map(|p| p.mean[j]).collect();
            let mut variances: Vec<f64> = per_expert.iter().map(|p| p.variance[j]).collect();
            means.push(0.0);
            variances.push(fresh_var);
            points.push(PointPredictive { weights, means, variances });
        }
        Ok(points)
    }

    /// Rebuild a particle from its assignment history plus per-cluster
    /// hyperparameters and cached likelihoods. `batches` is the absorbed
    /// data stream, indexed by batch id starting at 1.
    pub fn restore(
        dim: usize,
        stream_id: u64,
        log_weight: f64,
        prev_total_lml: f64,
        assignment_log: Vec<Assignment>,
        batches: &[(&[f64], &[f64])],
        expert_params: &BTreeMap<usize, (KernelHyperparams, f64)>,
    ) -> Result<Self> {
        let mut p = Particle::new(dim, stream_id);
        for rec in &assignment_log {
            let bi = rec
                .batch
                .checked_sub(1)
                .and_then(|b| usize::try_from(b).ok())
                .filter(|b| *b < batches.len())
                .ok_or_else(|| Error::Input(format!("assignment references unknown batch {}", rec.batch)))?;
            let (bx, by) = batches[bi];
            if rec.index >= by.len() {
                return Err(Error::Input(format!(
                    "assignment references point {} of batch {} which has {} points",
                    rec.index,
                    rec.batch,
                    by.len()
                )));
            }
            let xi = &bx[rec.index * dim..(rec.index + 1) * dim];
            let expert = p.experts.entry(rec.cluster).or_insert_with(|| ExpertState::new(dim));
            expert.push(xi, by[rec.index]);
            p.out_count += 1;
            p.out_sum += by[rec.index];
            p.out_sumsq += by[rec.index] * by[rec.index];
            p.next_cluster_id = p.next_cluster_id.max(rec.cluster + 1);
        }
        p.assignment_log = assignment_log;
        if p.experts.len() != expert_params.len() || !p.experts.keys().all(|k| expert_params.contains_key(k)) {
            return Err(Error::Input(String::from(
                "expert parameters do not match the clusters present in the assignment log",
            )));
        }
        for (id, (theta, cached)) in expert_params {
            let expert = p.experts.get_mut(id).expect("validated above");
            expert.adopt(*theta, *cached)?;
        }
        p.log_weight = log_weight;
        p.prev_total_lml = prev_total_lml;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gp_predict;
    use alloc::vec;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior_1d() -> NiwParams {
        NiwParams::new(DVector::from_element(1, 0.0), 0.01, DMatrix::from_element(1, 1, 3.0), 3.0).unwrap()
    }

    fn opts() -> OptimizerConfig {
        OptimizerConfig { max_iters: 40, grad_tol: 1e-4 }
    }

    #[test]
    fn first_point_opens_exactly_one_cluster() {
        let mut p = Particle::new(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        p.assign_batch(&[0.5], &[1.0], 1, 2.0, &prior_1d(), &mut rng).unwrap();
        assert_eq!(p.cluster_count(), 1);
        assert_eq!(p.total_points(), 1);
        assert_eq!(p.assignment_log.len(), 1);
    }

    #[test]
    fn vanishing_concentration_never_opens_new_clusters() {
        let prior = prior_1d();
        let mut p = Particle::new(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p.assign_batch(&[0.0], &[0.3], 1, 1e-12, &prior, &mut rng).unwrap();
        let xs: Vec<f64> = (0..100).map(|i| (i as f64) * 0.01).collect();
        let ys = vec![0.1; 100];
        p.assign_batch(&xs, &ys, 2, 1e-12, &prior, &mut rng).unwrap();
        assert_eq!(p.cluster_count(), 1);
        assert_eq!(p.total_points(), 101);
    }

    #[test]
    fn batch_dimension_mismatch_is_rejected() {
        let mut p = Particle::new(2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = p.assign_batch(&[0.0, 1.0, 2.0], &[1.0, 2.0], 1, 2.0, &prior_1d(), &mut rng);
        assert!(matches!(res, Err(Error::Input(_))));
    }

    #[test]
    fn refresh_touches_only_dirty_experts_and_is_idempotent() {
        let prior = prior_1d();
        let mut p = Particle::new(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        p.assign_batch(&xs, &ys, 1, 2.0, &prior, &mut rng).unwrap();
        let first = p.refresh_hyperparams(&opts(), 0, &mut rng).unwrap();
        assert_eq!(first.refreshed, p.cluster_count());

        let second = p.refresh_hyperparams(&opts(), 0, &mut rng).unwrap();
        assert_eq!(second, RefreshStats::default());

        // A batch landing in one cluster dirties exactly that cluster.
        let target = *p.experts.keys().next().unwrap();
        let near: Vec<f64> = p.experts[&target].inputs()[..1].to_vec();
        p.assign_batch(&near, &[0.2], 2, 1e-12, &prior, &mut rng).unwrap();
        let third = p.refresh_hyperparams(&opts(), 0, &mut rng).unwrap();
        assert_eq!(third.refreshed, 1);
    }

    #[test]
    fn weight_increments_telescope() {
        let prior = prior_1d();
        let mut p = Particle::new(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut total_inc = 0.0;
        for step in 1..=4u64 {
            let xs: Vec<f64> = (0..8).map(|i| (step as f64) + i as f64 * 0.1).collect();
            let ys: Vec<f64> = xs.iter().map(|x| (0.7 * x).cos()).collect();
            p.assign_batch(&xs, &ys, step, 1.0, &prior, &mut rng).unwrap();
            p.refresh_hyperparams(&opts(), 0, &mut rng).unwrap();
            total_inc += p.weight_increment();
        }
        assert_relative_eq!(total_inc, p.total_cached_lml(), epsilon = 1e-10);
        assert_relative_eq!(p.log_weight, p.total_cached_lml(), epsilon = 1e-10);

        // Nothing new absorbed, nothing refreshed → zero increment.
        assert_eq!(p.weight_increment(), 0.0);
    }

    #[test]
    fn predict_collapses_to_the_single_expert_when_alpha_vanishes() {
        let prior = prior_1d();
        let mut p = Particle::new(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..15).map(|i| i as f64 * 0.2).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x - 1.0).sin()).collect();
        p.assign_batch(&xs, &ys, 1, 1e-12, &prior, &mut rng).unwrap();
        p.refresh_hyperparams(&opts(), 0, &mut rng).unwrap();
        assert_eq!(p.cluster_count(), 1);

        let test = [0.55, 2.3];
        let mixture = p.predict(&test, 1e-12, &prior).unwrap();
        let expert = p.experts.values().next().unwrap();
        let direct = gp_predict(&expert.data_view(), &expert.theta, &test).unwrap();
        for (j, point) in mixture.iter().enumerate() {
            let wsum: f64 = point.weights.iter().sum();
            assert_relative_eq!(wsum, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(point.mean(), direct.mean[j], epsilon = 1e-6);
            assert_abs_diff_eq!(point.variance(), direct.variance[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn replayed_particle_matches_the_original() {
        let prior = prior_1d();
        let mut p = Particle::new(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x1: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let y1: Vec<f64> = x1.iter().map(|x| x.sin()).collect();
        let x2: Vec<f64> = (0..6).map(|i| 20.0 + i as f64 * 0.5).collect();
        let y2: Vec<f64> = x2.iter().map(|x| x.cos()).collect();
        p.assign_batch(&x1, &y1, 1, 2.0, &prior, &mut rng).unwrap();
        p.refresh_hyperparams(&opts(), 0, &mut rng).unwrap();
        p.weight_increment();
        p.assign_batch(&x2, &y2, 2, 2.0, &prior, &mut rng).unwrap();
        p.refresh_hyperparams(&opts(), 0, &mut rng).unwrap();
        p.weight_increment();

        let params: BTreeMap<usize, (KernelHyperparams, f64)> =
            p.experts.iter().map(|(id, e)| (*id, (e.theta, e.cached_lml))).collect();
        let restored = Particle::restore(
            1,
            p.stream_id,
            p.log_weight,
            p.prev_total_lml,
            p.assignment_log.clone(),
            &[(&x1, &y1), (&x2, &y2)],
            &params,
        )
        .unwrap();

        assert_eq!(restored.cluster_count(), p.cluster_count());
        for (id, e) in &p.experts {
            let r = &restored.experts[id];
            assert_eq!(r.stats.count, e.stats.count);
            assert_eq!(r.inputs(), e.inputs());
            assert_eq!(r.outputs(), e.outputs());
            assert_eq!(r.theta, e.theta);
            assert_eq!(r.cached_lml, e.cached_lml);
        }
        assert_eq!(restored.log_weight, p.log_weight);

        // Identical continuation: one more identical step on both.
        let x3 = [3.3, 8.1];
        let y3 = [0.4, -0.2];
        let mut rng_a = ChaCha8Rng::seed_from_u64(99);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        let mut p2 = p.clone();
        let mut r2 = restored;
        let ca = p2.assign_batch(&x3, &y3, 3, 2.0, &prior, &mut rng_a).unwrap();
        let cb = r2.assign_batch(&x3, &y3, 3, 2.0, &prior, &mut rng_b).unwrap();
        assert_eq!(ca, cb);
        p2.refresh_hyperparams(&opts(), 0, &mut rng_a).unwrap();
        r2.refresh_hyperparams(&opts(), 0, &mut rng_b).unwrap();
        assert_eq!(p2.weight_increment().to_bits(), r2.weight_increment().to_bits());
    }
}
