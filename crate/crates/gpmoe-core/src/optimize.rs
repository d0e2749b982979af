//! MAP hyperparameter fitting: BFGS ascent on the tempered log marginal
//! likelihood over the three log-domain kernel parameters.
//!
//! With a flat prior in log space the MAP point is the marginal-likelihood
//! maximizer, so the objective is [`crate::kernel::lml_and_gradient`]
//! directly. The search direction comes from an inverse-Hessian estimate
//! (3×3, so updates are essentially free) with a backtracking Armijo line
//! search; only improving steps are accepted, which keeps the returned
//! objective monotone in the starting value.

use alloc::string::String;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] use num_traits::Float; // float math in no_std builds

use crate::kernel::{lml_and_gradient, GpDataView, KernelHyperparams};
use crate::{Error, Result};

/// Stopping rules for the ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Hard cap on accepted steps (must be ≥ 1).
    pub max_iters: usize,
    /// Converged when the gradient ∞-norm drops below this.
    pub grad_tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { max_iters: 100, grad_tol: 1e-4 }
    }
}

/// Result of one optimization run, with instrumentation used by the warm
/// start bookkeeping (a warm refresh must be able to prove it ran zero
/// gradient iterations).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOutcome {
    pub theta: KernelHyperparams,
    pub value: f64,
    /// Accepted ascent steps.
    pub iterations: usize,
    /// Objective/gradient evaluations (line-search probes included).
    pub evals: usize,
    /// True when the gradient tolerance was reached.
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;
/// Largest allowed ∞-norm of a single step in log space.
const MAX_STEP: f64 = 10.0;

fn as_vec(theta: &KernelHyperparams) -> Vector3<f64> {
    Vector3::new(theta.log_lengthscale, theta.log_signal_var, theta.log_noise_var)
}

fn from_vec(v: &Vector3<f64>) -> KernelHyperparams {
    KernelHyperparams {
        log_lengthscale: v[0],
        log_signal_var: v[1],
        log_noise_var: v[2],
    }
}

/// Maximize the tempered log marginal likelihood from `theta_init`.
///
/// The returned objective is never below the starting objective. A
/// non-finite objective at the start is an input error; evaluation failures
/// later in the search just truncate it.
pub fn optimize_hyperparams(
    data: &GpDataView<'_>,
    theta_init: &KernelHyperparams,
    opts: &OptimizerConfig,
) -> Result<OptimizeOutcome> {
    if data.is_empty() {
        return Err(Error::Input(String::from("cannot optimize on zero points")));
    }
    if opts.max_iters == 0 {
        return Err(Error::Input(String::from("max_iters must be ≥ 1")));
    }
    let mut evals = 0usize;
    let mut eval = |v: &Vector3<f64>| -> Option<(f64, Vector3<f64>)> {
        evals += 1;
        let th = from_vec(v);
        match lml_and_gradient(data, &th) {
            Ok((f, g)) if f.is_finite() => Some((f, Vector3::new(g[0], g[1], g[2]))),
            _ => None,
        }
    };

    let mut x = as_vec(theta_init);
    let (mut f, mut g) = eval(&x).ok_or_else(|| {
        Error::Input(String::from("objective is not finite at the starting hyperparameters"))
    })?;

    let mut h = Matrix3::identity();
    let mut iterations = 0usize;
    let mut converged = g.amax() < opts.grad_tol;

    while !converged && iterations < opts.max_iters {
        let mut dir = h * g;
        if dir.dot(&g) <= 0.0 {
            // Curvature estimate went bad; restart from steepest ascent.
            h = Matrix3::identity();
            dir = g;
        }
        let amax = dir.amax();
        if amax > MAX_STEP {
            dir *= MAX_STEP / amax;
        }

        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = x + dir * t;
            if let Some((fc, gc)) = eval(&cand) {
                if fc >= f + ARMIJO_C1 * t * slope {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break; // line search stalled at the current point
        };

        // Inverse-Hessian update on the negated problem; skip when the
        // curvature condition fails.
        let s = xn - x;
        let yk = g - gn; // y for the minimization of −f
        let sy = s.dot(&yk);
        if sy > 1e-12 * s.norm() * yk.norm() {
            let rho = 1.0 / sy;
            let i = Matrix3::identity();
            let left = i - (s * yk.transpose()) * rho;
            h = left * h * left.transpose() + (s * s.transpose()) * rho;
        }

        x = xn;
        f = fn_;
        g = gn;
        iterations += 1;
        converged = g.amax() < opts.grad_tol;
    }

    Ok(OptimizeOutcome { theta: from_vec(&x), value: f, iterations, evals, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::log_marginal_likelihood;

    fn toy_data() -> (std::vec::Vec<f64>, std::vec::Vec<f64>) {
        // Deterministic jitter keeps the noise variance at an interior
        // optimum; noiseless outputs would drive log σ² off to −∞.
        let mut state = 0x2545f4914f6cdd1du64;
        let mut noise = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x: std::vec::Vec<f64> = (0..30).map(|i| i as f64 * 0.25).collect();
        let y: std::vec::Vec<f64> = x.iter().map(|v| (1.3 * v).sin() + 0.4 * noise()).collect();
        (x, y)
    }

    #[test]
    fn never_returns_below_the_starting_objective() {
        let (x, y) = toy_data();
        let data = GpDataView::new(1, &x, &y, 1.0).unwrap();
        let start = KernelHyperparams::new(0.0, 0.0, 0.0).unwrap();
        let f0 = log_marginal_likelihood(&data, &start).unwrap();
        for max_iters in [1, 3, 100] {
            let out = optimize_hyperparams(&data, &start, &OptimizerConfig { max_iters, grad_tol: 1e-4 }).unwrap();
            assert!(out.value >= f0, "objective regressed: {} < {f0}", out.value);
            assert!(out.iterations <= max_iters);
        }
    }

    #[test]
    fn zero_iterations_is_rejected() {
        let (x, y) = toy_data();
        let data = GpDataView::new(1, &x, &y, 1.0).unwrap();
        let start = KernelHyperparams::new(0.0, 0.0, 0.0).unwrap();
        let res = optimize_hyperparams(&data, &start, &OptimizerConfig { max_iters: 0, grad_tol: 1e-4 });
        assert!(matches!(res, Err(Error::Input(_))));
    }

    #[test]
    fn local_optimum_is_a_fixed_point() {
        let (x, y) = toy_data();
        let data = GpDataView::new(1, &x, &y, 1.0).unwrap();
        let start = KernelHyperparams::new(0.0, 0.0, 0.0).unwrap();
        let opts = OptimizerConfig { max_iters: 200, grad_tol: 1e-6 };
        let out = optimize_hyperparams(&data, &start, &opts).unwrap();
        assert!(out.converged);
        let again = optimize_hyperparams(&data, &out.theta, &opts).unwrap();
        assert_eq!(again.iterations, 0);
        assert_eq!(again.theta, out.theta);
    }
}
