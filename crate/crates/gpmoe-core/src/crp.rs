//! Conjugate input-space clustering: normal-inverse-Wishart sufficient
//! statistics, posterior updates, multivariate Student-t predictive
//! densities, and Chinese-restaurant-process assignment scores.
//!
//! Cluster membership is scored on inputs only — a point joins cluster k
//! with weight h_k · t(x | cluster posterior) or starts a new cluster with
//! weight α · t(x | prior). Output information never enters here; it acts
//! through the particle weights instead.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)] use num_traits::Float; // float math in no_std builds
use rand::Rng;

use crate::math::{ln_gamma, logsumexp};
use crate::{Error, Result};

/// Normal-inverse-Wishart parameters (μ₀, λ, Ψ, ν) over a Gaussian's mean
/// and covariance. Doubles as the posterior parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams {
    pub mu: DVector<f64>,
    pub lambda: f64,
    pub psi: DMatrix<f64>,
    pub nu: f64,
}

impl NiwParams {
    pub fn new(mu: DVector<f64>, lambda: f64, psi: DMatrix<f64>, nu: f64) -> Result<Self> {
        let d = mu.len();
        if psi.nrows() != d || psi.ncols() != d {
            return Err(Error::Input(format!("scale matrix is {}×{}, expected {d}×{d}", psi.nrows(), psi.ncols())));
        }
        if !(lambda > 0.0) {
            return Err(Error::Input(format!("mean-precision scale must be positive, got {lambda}")));
        }
        if !(nu > d as f64 - 1.0) {
            return Err(Error::Input(format!("degrees of freedom {nu} not above D−1 = {}", d as f64 - 1.0)));
        }
        if psi.clone().cholesky().is_none() {
            return Err(Error::Input(String::from("scale matrix is not symmetric positive definite")));
        }
        Ok(Self { mu, lambda, psi, nu })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Posterior predictive density of one observation: a multivariate
    /// Student-t with location μ, scale Ψ(λ+1)/(λ(ν−D+1)), and ν−D+1
    /// degrees of freedom.
    pub fn predictive(&self) -> MvtParams {
        let d = self.dim() as f64;
        let dof = self.nu - d + 1.0;
        let scale = &self.psi * ((self.lambda + 1.0) / (self.lambda * dof));
        MvtParams { loc: self.mu.clone(), scale, dof }
    }
}

/// Running sufficient statistics of one cluster's inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub count: usize,
    pub sum: DVector<f64>,
    pub sum_outer: DMatrix<f64>,
}

impl ClusterStats {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, sum: DVector::zeros(dim), sum_outer: DMatrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    /// Absorb one observation.
    pub fn add(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        for i in 0..x.len() {
            self.sum[i] += x[i];
            for j in 0..x.len() {
                self.sum_outer[(i, j)] += x[i] * x[j];
            }
        }
    }

    /// Remove one observation previously absorbed.
    pub fn remove(&mut self, x: &[f64]) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Input(String::from("cannot remove an observation from an empty cluster")));
        }
        self.count -= 1;
        for i in 0..x.len() {
            self.sum[i] -= x[i];
            for j in 0..x.len() {
                self.sum_outer[(i, j)] -= x[i] * x[j];
            }
        }
        if self.count == 0 {
            self.sum.fill(0.0);
            self.sum_outer.fill(0.0);
        }
        Ok(())
    }

    pub fn mean(&self) -> DVector<f64> {
        if self.count == 0 {
            return DVector::zeros(self.dim());
        }
        &self.sum / self.count as f64
    }
}

/// Multivariate Student-t parameters used by the predictive scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MvtParams {
    pub loc: DVector<f64>,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

impl MvtParams {
    /// Log density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        let d = self.loc.len();
        if x.len() != d {
            return Err(Error::Input(format!("point has dimension {}, expected {d}", x.len())));
        }
        let chol = self
            .scale
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(String::from("predictive scale matrix is not positive definite")))?;
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let diff = DVector::from_fn(d, |i, _| x[i] - self.loc[i]);
        let z = chol.solve(&diff);
        let maha = diff.dot(&z);
        let df = self.dof;
        let dd = d as f64;
        Ok(ln_gamma(0.5 * (df + dd))
            - ln_gamma(0.5 * df)
            - 0.5 * dd * (df * core::f64::consts::PI).ln()
            - 0.5 * logdet
            - 0.5 * (df + dd) * (1.0 + maha / df).ln())
    }
}

/// Conjugate posterior update of NIW parameters from cluster statistics.
pub fn niw_posterior(prior: &NiwParams, stats: &ClusterStats) -> NiwParams {
    if stats.count == 0 {
        return prior.clone();
    }
    let n = stats.count as f64;
    let xbar = stats.mean();
    let lambda_n = prior.lambda + n;
    let nu_n = prior.nu + n;
    let mu_n = (&prior.mu * prior.lambda + &stats.sum) / lambda_n;
    // Scatter about the sample mean: Σxxᵀ − n x̄x̄ᵀ.
    let scatter = &stats.sum_outer - (&xbar * xbar.transpose()) * n;
    let dmean = &xbar - &prior.mu;
    let psi_n = &prior.psi + scatter + (&dmean * dmean.transpose()) * (prior.lambda * n / lambda_n);
    NiwParams { mu: mu_n, lambda: lambda_n, psi: psi_n, nu: nu_n }
}

/// Log predictive density of `x` under the NIW posterior predictive
/// Student-t (pass the prior itself for the new-cluster score).
pub fn mvt_log_predictive(x: &[f64], params: &NiwParams) -> Result<f64> {
    params.predictive().log_pdf(x)
}

/// Normalized log probabilities of assigning `x` to each existing cluster
/// (in the order given) or, in the last slot, to a fresh cluster.
pub fn crp_assignment_logprobs(
    x: &[f64],
    clusters: &[&ClusterStats],
    alpha: f64,
    prior: &NiwParams,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Input(format!("concentration must be positive, got {alpha}")));
    }
    let mut scores = Vec::with_capacity(clusters.len() + 1);
    for stats in clusters {
        debug_assert!(stats.count >= 1, "assignment scores expect occupied clusters");
        let post = niw_posterior(prior, stats);
        scores.push((stats.count as f64).ln() + mvt_log_predictive(x, &post)?);
    }
    scores.push(alpha.ln() + mvt_log_predictive(x, prior)?);
    let norm = logsumexp(&scores);
    for s in &mut scores {
        *s -= norm;
    }
    Ok(scores)
}

/// Draw a slot index from normalized log probabilities.
pub fn sample_assignment<R: Rng>(logprobs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logprobs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior_1d() -> NiwParams {
        NiwParams::new(DVector::from_element(1, 0.0), 1.0, DMatrix::from_element(1, 1, 2.0), 3.0).unwrap()
    }

    #[test]
    fn posterior_is_identity_on_empty_stats() {
        let prior = prior_1d();
        let post = niw_posterior(&prior, &ClusterStats::new(1));
        assert_eq!(post, prior);
    }

    #[test]
    fn posterior_single_observation_closed_form() {
        // D=1, μ0=0, λ=1, one observation x=2 → μ'=1, λ'=2, ν'=ν+1.
        let prior = prior_1d();
        let mut stats = ClusterStats::new(1);
        stats.add(&[2.0]);
        let post = niw_posterior(&prior, &stats);
        assert_relative_eq!(post.mu[0], 1.0, max_relative = 1e-15);
        assert_relative_eq!(post.lambda, 2.0, max_relative = 1e-15);
        assert_relative_eq!(post.nu, 4.0, max_relative = 1e-15);
        // Ψ' = Ψ + 0 + (λn/(λ+n))(x̄−μ0)² = 2 + 0.5·4 = 4.
        assert_relative_eq!(post.psi[(0, 0)], 4.0, max_relative = 1e-15);
    }

    #[test]
    fn stats_add_remove_roundtrip() {
        let mut stats = ClusterStats::new(2);
        stats.add(&[1.0, 2.0]);
        assert_eq!(stats.count, 1);
        assert_eq!(stats.sum.as_slice(), &[1.0, 2.0]);
        assert_eq!(stats.sum_outer, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));

        let before = stats.clone();
        stats.add(&[-0.5, 0.25]);
        stats.remove(&[-0.5, 0.25]).unwrap();
        assert_eq!(stats.count, before.count);
        for i in 0..2 {
            assert_relative_eq!(stats.sum[i], before.sum[i], epsilon = 1e-12);
            for j in 0..2 {
                assert_relative_eq!(stats.sum_outer[(i, j)], before.sum_outer[(i, j)], epsilon = 1e-12);
            }
        }
        assert!(ClusterStats::new(2).remove(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn predictive_is_symmetric_about_location() {
        let prior = prior_1d();
        let mut stats = ClusterStats::new(1);
        for x in [0.4, 1.1, -0.3] {
            stats.add(&[x]);
        }
        let post = niw_posterior(&prior, &stats);
        let loc = post.mu[0];
        let a = mvt_log_predictive(&[loc + 0.7], &post).unwrap();
        let b = mvt_log_predictive(&[loc - 0.7], &post).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
        // And the mode is at the location.
        let at_loc = mvt_log_predictive(&[loc], &post).unwrap();
        assert!(at_loc > a);
    }

    #[test]
    fn first_customer_always_opens_a_table() {
        let prior = prior_1d();
        let lp = crp_assignment_logprobs(&[0.3], &[], 2.0, &prior).unwrap();
        assert_eq!(lp.len(), 1);
        assert_relative_eq!(lp[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn assignment_scores_normalize_and_follow_counts() {
        let prior = prior_1d();
        let mut a = ClusterStats::new(1);
        for x in [0.2, 0.4, 0.6] {
            a.add(&[x]);
        }
        let mut b = ClusterStats::new(1);
        b.add(&[-1.9]);
        let lp = crp_assignment_logprobs(&[0.5], &[&a, &b], 1.5, &prior).unwrap();
        assert_eq!(lp.len(), 3);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);

        // A cluster listed twice competes against itself with equal scores:
        // same predictive, same count.
        let lp = crp_assignment_logprobs(&[0.5], &[&a, &a], 1.5, &prior).unwrap();
        assert_relative_eq!(lp[0], lp[1], epsilon = 1e-12);

        // The occupancy factor enters as an exact ln h_k offset when the
        // predictive term is shared, so counts 3 vs 1 give a 3:1 ratio.
        let post = niw_posterior(&prior, &a);
        let t = mvt_log_predictive(&[0.5], &post).unwrap();
        let ratio = ((3.0f64).ln() + t) - ((1.0f64).ln() + t);
        assert_relative_eq!(ratio.exp(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_degenerate_probs() {
        assert_eq!(sample_assignment(&[0.0], &mut ChaCha8Rng::seed_from_u64(1)), 0);
        let lp = vec![(0.25f64).ln(), (0.75f64).ln()];
        let draws_a: Vec<usize> =
            (0..64).map(|_| sample_assignment(&lp, &mut ChaCha8Rng::seed_from_u64(9))).collect();
        let draws_b: Vec<usize> =
            (0..64).map(|_| sample_assignment(&lp, &mut ChaCha8Rng::seed_from_u64(9))).collect();
        assert_eq!(draws_a, draws_b);
    }
}
