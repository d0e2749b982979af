//! Hyperparameter transfer as a bandit problem: harvest kernel
//! configurations ("arms") from a fitted ensemble's best particle, then on
//! new data let each dirty cluster pick the arm with the highest marginal
//! likelihood instead of running gradient optimization.
//!
//! The pool can grow: when a fresh default-initialized optimization beats
//! every pooled arm on a cluster, the fresh configuration is adopted and
//! proposed as a new arm. Proposals from all particles are merged at the
//! end-of-batch synchronization point, in particle order, so pool contents
//! do not depend on scheduling.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::engine::Ensemble;
use crate::kernel::{log_marginal_likelihood, GpDataView, KernelHyperparams};
use crate::optimize::{optimize_hyperparams, OptimizerConfig};
use crate::particle::{Particle, RefreshStats};
use crate::{Error, Result};

/// Where an arm came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmProvenance {
    pub run_id: String,
    pub particle: usize,
    pub cluster: usize,
}

/// One candidate kernel configuration with its provenance and the cached
/// marginal likelihood it had when harvested.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub theta: KernelHyperparams,
    pub provenance: ArmProvenance,
    pub harvest_lml: f64,
}

/// The bandit's arm set. The version counts appended arms, so it moves
/// exactly when the pool grows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArmPool {
    pub arms: Vec<Arm>,
    pub version: u64,
}

impl ArmPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, arm: Arm) {
        self.arms.push(arm);
        self.version += 1;
    }

    pub fn len(&self) -> usize {
        self.arms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arms.is_empty()
    }
}

/// Collect the hyperparameters of every expert in the highest-weight
/// particle (ties broken toward the lowest particle index).
pub fn harvest_arms(ens: &Ensemble, run_id: &str) -> Result<ArmPool> {
    if ens.step_counter() == 0 {
        return Err(Error::State(String::from("cannot harvest arms from an unfitted ensemble")));
    }
    let particles = ens.particles();
    let mut best = 0usize;
    for (i, p) in particles.iter().enumerate() {
        if p.log_weight > particles[best].log_weight {
            best = i;
        }
    }
    let mut pool = ArmPool::new();
    for (cluster, expert) in &particles[best].experts {
        pool.push(Arm {
            theta: expert.theta,
            provenance: ArmProvenance { run_id: String::from(run_id), particle: best, cluster: *cluster },
            harvest_lml: expert.cached_lml,
        });
    }
    Ok(pool)
}

/// Evaluate every arm's marginal likelihood on the cluster data and return
/// the best arm and its reward. No gradient steps are taken. Ties go to the
/// earlier arm; arms that fail numerically are skipped.
pub fn select_arm(pool: &ArmPool, cluster_data: &GpDataView<'_>) -> Result<(Arm, f64)> {
    if pool.is_empty() {
        return Err(Error::Input(String::from("arm pool is empty")));
    }
    if cluster_data.is_empty() {
        return Err(Error::Input(String::from("cluster data is empty")));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, arm) in pool.arms.iter().enumerate() {
        let Ok(reward) = log_marginal_likelihood(cluster_data, &arm.theta) else {
            continue;
        };
        if !reward.is_finite() {
            continue;
        }
        if best.map_or(true, |(_, r)| reward > r) {
            best = Some((i, reward));
        }
    }
    let (idx, reward) =
        best.ok_or_else(|| Error::Numerical(String::from("every arm failed on this cluster")))?;
    Ok((pool.arms[idx].clone(), reward))
}

/// Result of a warm refresh pass over one particle.
#[derive(Debug, Clone, Default)]
pub struct WarmRefreshOut {
    pub refresh: RefreshStats,
    /// Freshly grown arms to merge into the pool at the batch boundary.
    /// `provenance.particle` is filled in by the engine during the merge.
    pub candidates: Vec<Arm>,
}

/// Arm-selection replacement for the gradient refresh: every dirty expert
/// adopts the best arm. With `allow_new_arm`, one fresh optimization run
/// per expert may beat the pool and become a new arm; with `refine`, the
/// selected arm is additionally polished by gradient ascent.
pub fn warm_refresh<R: Rng>(
    particle: &mut Particle,
    pool: &ArmPool,
    allow_new_arm: bool,
    refine: bool,
    opts: &OptimizerConfig,
    minibatch: usize,
    rng: &mut R,
) -> Result<WarmRefreshOut> {
    let mut out = WarmRefreshOut::default();
    let ids: Vec<usize> = particle.experts.keys().copied().collect();
    for id in ids {
        let expert = particle.experts.get_mut(&id).expect("cluster id from key set");
        if !expert.dirty {
            continue;
        }
        let data = expert.refresh_data(minibatch, rng);
        let (mut theta, mut value) = {
            let view = data.view(expert);
            let (arm, reward) = select_arm(pool, &view)?;
            (arm.theta, reward)
        };
        if refine {
            let view = data.view(expert);
            let refined = optimize_hyperparams(&view, &theta, opts)?;
            out.refresh.iterations += refined.iterations;
            out.refresh.evals += refined.evals;
            theta = refined.theta;
            value = refined.value;
        }
        if allow_new_arm {
            let start = expert.starting_theta();
            let view = data.view(expert);
            let fresh = optimize_hyperparams(&view, &start, opts)?;
            out.refresh.iterations += fresh.iterations;
            out.refresh.evals += fresh.evals;
            if fresh.value > value {
                theta = fresh.theta;
                value = fresh.value;
                out.candidates.push(Arm {
                    theta: fresh.theta,
                    provenance: ArmProvenance { run_id: String::from("grown"), particle: 0, cluster: id },
                    harvest_lml: fresh.value,
                });
            }
        }
        expert.adopt(theta, value)?;
        out.refresh.refreshed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Batch, EngineConfig, Ensemble};
    use crate::exec::SerialExecutor;
    use crate::optimize::OptimizerConfig;
    use alloc::vec;
    use approx::assert_relative_eq;

    fn fitted_ensemble(j: usize, seed: u64) -> Ensemble {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let y: Vec<f64> = x.iter().map(|v| (1.1 * v).sin()).collect();
        let config = EngineConfig {
            num_particles: j,
            optimizer: OptimizerConfig { max_iters: 25, grad_tol: 1e-3 },
            seed,
            ..EngineConfig::default()
        };
        Ensemble::init(Batch::new(1, x, y).unwrap(), config, &SerialExecutor).unwrap()
    }

    #[test]
    fn harvest_takes_every_expert_of_the_best_particle() {
        let ens = fitted_ensemble(3, 17);
        let pool = harvest_arms(&ens, "run-a").unwrap();
        let particles = ens.particles();
        // Ties break toward the lowest particle index.
        let mut best = 0;
        for i in 1..3 {
            if particles[i].log_weight > particles[best].log_weight {
                best = i;
            }
        }
        assert_eq!(pool.len(), particles[best].cluster_count());
        for arm in &pool.arms {
            assert_eq!(arm.provenance.run_id, "run-a");
            assert_eq!(arm.provenance.particle, best);
        }
        // Determinism: a rerun with the same seed harvests the same pool.
        let again = harvest_arms(&fitted_ensemble(3, 17), "run-a").unwrap();
        assert_eq!(pool, again);
    }

    #[test]
    fn harvest_from_single_particle_and_unfitted_state() {
        let ens = fitted_ensemble(1, 2);
        let pool = harvest_arms(&ens, "solo").unwrap();
        assert_eq!(pool.len(), ens.particles()[0].cluster_count());
    }

    #[test]
    fn select_arm_is_argmax_of_the_marginal_likelihood() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| (0.8 * v).sin()).collect();
        let data = GpDataView::new(1, &x, &y, 1.0).unwrap();

        let good = KernelHyperparams::new(0.0, 0.0, (0.05f64).ln()).unwrap();
        let awful = KernelHyperparams::new((1e4f64).ln(), (1e-6f64).ln(), (1e6f64).ln()).unwrap();
        let mut pool = ArmPool::new();
        let prov = |c| ArmProvenance { run_id: String::from("t"), particle: 0, cluster: c };
        pool.push(Arm { theta: awful, provenance: prov(0), harvest_lml: 0.0 });
        pool.push(Arm { theta: good, provenance: prov(1), harvest_lml: 0.0 });
        assert_eq!(pool.version, 2);

        let (arm, reward) = select_arm(&pool, &data).unwrap();
        assert_eq!(arm.theta, good);
        // The reward is exactly the marginal likelihood of the chosen arm.
        assert_relative_eq!(reward, log_marginal_likelihood(&data, &good).unwrap(), epsilon = 1e-12);

        // Singleton pool: forced choice.
        let mut solo = ArmPool::new();
        solo.push(Arm { theta: awful, provenance: prov(0), harvest_lml: 0.0 });
        let (forced, _) = select_arm(&solo, &data).unwrap();
        assert_eq!(forced.theta, awful);
    }

    #[test]
    fn argmax_is_invariant_to_monotone_reward_transforms() {
        // Rewards are compared, never combined, so any increasing transform
        // applied to all of them leaves the argmax unchanged.
        let rewards = vec![-14.2, -3.7, -22.0, -3.9];
        let argmax = |vals: &[f64]| {
            vals.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap()
        };
        let base = argmax(&rewards);
        let scaled: Vec<f64> = rewards.iter().map(|r| 3.0 * r + 11.0).collect();
        let expd: Vec<f64> = rewards.iter().map(|r| (0.01 * r).exp()).collect();
        assert_eq!(argmax(&scaled), base);
        assert_eq!(argmax(&expd), base);
    }

    #[test]
    fn warm_refresh_without_growth_does_zero_optimizer_work() {
        let ens = fitted_ensemble(2, 23);
        let pool = harvest_arms(&ens, "src").unwrap();

        let target = fitted_ensemble(1, 5);
        let x: Vec<f64> = (0..10).map(|i| 7.0 + i as f64 * 0.2).collect();
        let y: Vec<f64> = x.iter().map(|v| (1.1 * v).sin()).collect();
        let mut p = target.particles()[0].clone();
        let prior = target.prior().clone();
        let mut rng = crate::rng::derive_stream(1, 0, 2, 1);
        p.assign_batch(&x, &y, 2, 2.0, &prior, &mut rng).unwrap();
        let out = warm_refresh(&mut p, &pool, false, false, &OptimizerConfig::default(), 0, &mut rng).unwrap();
        assert!(out.refresh.refreshed >= 1);
        assert_eq!(out.refresh.iterations, 0);
        assert_eq!(out.refresh.evals, 0);
        assert!(out.candidates.is_empty());

        // Clean particle → no work at all.
        let out2 = warm_refresh(&mut p, &pool, false, false, &OptimizerConfig::default(), 0, &mut rng).unwrap();
        assert_eq!(out2.refresh.refreshed, 0);
    }
}
