//! RBF-kernel Gaussian process machinery for a single expert: covariance
//! construction, (tempered) log marginal likelihood with analytic gradient,
//! and posterior predictive distributions.
//!
//! Hyperparameters live in log space so optimization is unconstrained.
//! Likelihood tempering multiplies the whole log marginal by `temper_power`,
//! which is how a minibatch of B points stands in for the full N (power
//! N/B); prediction never tempers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
#[allow(unused_imports)] use num_traits::Float; // float math in no_std builds

use crate::math::{mean_and_var, LN_2PI};
use crate::{Error, Result};

/// Log-parameterized RBF kernel settings for one expert:
/// k(x, x') = σ_f² · exp(−‖x − x'‖² / (2ℓ²)), observation noise σ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHyperparams {
    pub log_lengthscale: f64,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl KernelHyperparams {
    pub fn new(log_lengthscale: f64, log_signal_var: f64, log_noise_var: f64) -> Result<Self> {
        let h = Self { log_lengthscale, log_signal_var, log_noise_var };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.log_lengthscale, self.log_signal_var, self.log_noise_var].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Input(String::from("kernel hyperparameters must be finite")))
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    /// Data-driven starting point for a fresh cluster: lengthscale from the
    /// input spread, signal variance from the output variance, noise at 10%
    /// of it. Floors keep the log transform finite on degenerate clusters.
    pub fn default_for_data(dim: usize, inputs: &[f64], outputs: &[f64]) -> Self {
        let n = outputs.len();
        let mut pooled_var = 0.0;
        if n > 0 && dim > 0 {
            for d in 0..dim {
                let col: Vec<f64> = (0..n).map(|i| inputs[i * dim + d]).collect();
                pooled_var += mean_and_var(&col).1;
            }
            pooled_var /= dim as f64;
        }
        let (_, var_y) = mean_and_var(outputs);
        Self {
            log_lengthscale: pooled_var.sqrt().max(1e-3).ln(),
            log_signal_var: var_y.max(1e-6).ln(),
            log_noise_var: (0.1 * var_y).max(1e-8).ln(),
        }
    }
}

/// Borrowed view of one expert's (possibly subsampled) training data.
/// `inputs` is row-major with `dim` coordinates per point.
#[derive(Debug, Clone, Copy)]
pub struct GpDataView<'a> {
    pub dim: usize,
    pub inputs: &'a [f64],
    pub outputs: &'a [f64],
    pub temper_power: f64,
}

impl<'a> GpDataView<'a> {
    pub fn new(dim: usize, inputs: &'a [f64], outputs: &'a [f64], temper_power: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input(String::from("input dimension must be positive")));
        }
        if inputs.len() != outputs.len() * dim {
            return Err(Error::Input(format!(
                "{} input coordinates do not form {} points of dimension {}",
                inputs.len(),
                outputs.len(),
                dim
            )));
        }
        if !(temper_power >= 1.0) {
            return Err(Error::Input(format!("temper power must be ≥ 1, got {temper_power}")));
        }
        Ok(Self { dim, inputs, outputs, temper_power })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Marginal predictive means and variances at a set of test points.
/// Variances include observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Pairwise squared Euclidean distances between row-major point sets.
fn squared_distances(dim: usize, x1: &[f64], x2: &[f64]) -> DMatrix<f64> {
    let n = x1.len() / dim;
    let m = x2.len() / dim;
    DMatrix::from_fn(n, m, |i, j| {
        let mut s = 0.0;
        for d in 0..dim {
            let diff = x1[i * dim + d] - x2[j * dim + d];
            s += diff * diff;
        }
        s
    })
}

/// RBF covariance between two point sets (no observation noise on the
/// diagonal). Point sets must share `dim`.
pub fn rbf_covariance(dim: usize, x1: &[f64], x2: &[f64], theta: &KernelHyperparams) -> Result<DMatrix<f64>> {
    if dim == 0 || x1.len() % dim != 0 || x2.len() % dim != 0 {
        return Err(Error::Input(format!(
            "point buffers of {} and {} coordinates are not multiples of dimension {}",
            x1.len(),
            x2.len(),
            dim
        )));
    }
    let sf2 = theta.signal_var();
    let inv_two_ell2 = 0.5 / (theta.lengthscale() * theta.lengthscale());
    let mut k = squared_distances(dim, x1, x2);
    k.apply(|v| *v = sf2 * (-*v * inv_two_ell2).exp());
    Ok(k)
}

/// Cholesky with an escalating jitter ladder: plain attempt first, then
/// 1e-8·d̄ through 1e-2·d̄ in decades (d̄ = mean diagonal). Gives back the
/// factor and the jitter that succeeded.
fn cholesky_with_jitter(ky: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = ky.nrows();
    let mean_diag = ky.diagonal().sum() / n as f64;
    if let Some(ch) = ky.clone().cholesky() {
        return Ok((ch, 0.0));
    }
    let mut tried = Vec::new();
    let mut level = 1e-8;
    while level <= 1e-2 + 1e-15 {
        let jitter = level * mean_diag;
        let mut bumped = ky.clone();
        for i in 0..n {
            bumped[(i, i)] += jitter;
        }
        if let Some(ch) = bumped.cholesky() {
            return Ok((ch, jitter));
        }
        tried.push(jitter);
        level *= 10.0;
    }
    Err(Error::Numerical(format!("covariance not positive definite after jitter ladder {tried:?}")))
}

/// Shared factorization state: noisy covariance Cholesky plus the solved
/// weights α = (K + σ²I)⁻¹ y.
#[derive(Debug, Clone)]
pub struct GpFactor {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    n: usize,
}

impl GpFactor {
    pub fn fit(data: &GpDataView<'_>, theta: &KernelHyperparams) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input(String::from("cannot fit a GP on zero points")));
        }
        theta.validate()?;
        let n = data.len();
        let mut ky = rbf_covariance(data.dim, data.inputs, data.inputs, theta)?;
        let noise = theta.noise_var();
        for i in 0..n {
            ky[(i, i)] += noise;
        }
        let (chol, _) = cholesky_with_jitter(&ky)?;
        let y = DVector::from_column_slice(data.outputs);
        let alpha = chol.solve(&y);
        Ok(Self { chol, alpha, n })
    }

    /// Untempered log marginal likelihood of the data this factor was fit on.
    pub fn log_marginal(&self, outputs: &[f64]) -> f64 {
        let quad: f64 = outputs.iter().zip(self.alpha.iter()).map(|(y, a)| y * a).sum();
        let logdet: f64 = 2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * (quad + logdet + self.n as f64 * LN_2PI)
    }

    /// Posterior predictive at `test` given the training inputs the factor
    /// was built from. Reported variances include observation noise.
    pub fn predict(
        &self,
        dim: usize,
        train_inputs: &[f64],
        theta: &KernelHyperparams,
        test_inputs: &[f64],
    ) -> Result<PredictiveGaussian> {
        let kstar = rbf_covariance(dim, train_inputs, test_inputs, theta)?;
        let mean_vec = kstar.transpose() * &self.alpha;
        let l = self.chol.l();
        let v = l
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::Numerical(String::from("triangular solve failed in prediction")))?;
        let sf2 = theta.signal_var();
        let noise = theta.noise_var();
        let m = test_inputs.len() / dim;
        let mut mean = Vec::with_capacity(m);
        let mut variance = Vec::with_capacity(m);
        for j in 0..m {
            mean.push(mean_vec[j]);
            let explained: f64 = v.column(j).iter().map(|x| x * x).sum();
            variance.push(noise + (sf2 - explained).max(0.0));
        }
        Ok(PredictiveGaussian { mean, variance })
    }
}

/// Tempered log marginal likelihood
/// temper · [−½ yᵀ(K+σ²I)⁻¹y − ½ log|K+σ²I| − (n/2) log 2π].
pub fn log_marginal_likelihood(data: &GpDataView<'_>, theta: &KernelHyperparams) -> Result<f64> {
    let factor = GpFactor::fit(data, theta)?;
    Ok(data.temper_power * factor.log_marginal(data.outputs))
}

/// Log marginal likelihood and its gradient with respect to
/// (log ℓ, log σ_f², log σ²), both scaled by the temper power.
pub fn lml_and_gradient(data: &GpDataView<'_>, theta: &KernelHyperparams) -> Result<(f64, [f64; 3])> {
    if data.is_empty() {
        return Err(Error::Input(String::from("cannot evaluate a GP on zero points")));
    }
    theta.validate()?;
    let n = data.len();
    let d2 = squared_distances(data.dim, data.inputs, data.inputs);
    let sf2 = theta.signal_var();
    let ell2 = theta.lengthscale() * theta.lengthscale();
    let noise = theta.noise_var();
    let inv_two_ell2 = 0.5 / ell2;
    let mut ky = DMatrix::from_fn(n, n, |i, j| sf2 * (-d2[(i, j)] * inv_two_ell2).exp());
    let krbf = ky.clone();
    for i in 0..n {
        ky[(i, i)] += noise;
    }
    let (chol, _) = cholesky_with_jitter(&ky)?;
    let y = DVector::from_column_slice(data.outputs);
    let alpha = chol.solve(&y);
    let kinv = chol.inverse();

    let quad: f64 = data.outputs.iter().zip(alpha.iter()).map(|(yi, a)| yi * a).sum();
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let lml = -0.5 * (quad + logdet + n as f64 * LN_2PI);

    // Σ_ij (ααᵀ − K⁻¹)_ij ∘ ∂K/∂θ without materializing the outer product.
    let mut trace_g = 0.0;
    let mut sum_g_k = 0.0;
    let mut sum_g_k_d2 = 0.0;
    for j in 0..n {
        for i in 0..n {
            let g = alpha[i] * alpha[j] - kinv[(i, j)];
            let k = krbf[(i, j)];
            sum_g_k += g * k;
            sum_g_k_d2 += g * k * d2[(i, j)];
            if i == j {
                trace_g += g;
            }
        }
    }
    let t = data.temper_power;
    let grad = [
        t * 0.5 * sum_g_k_d2 / ell2, // ∂/∂ log ℓ via dK = K ∘ d²/ℓ²
        t * 0.5 * sum_g_k,           // ∂/∂ log σ_f² via dK = K
        t * 0.5 * noise * trace_g,   // ∂/∂ log σ² via dK = σ² I
    ];
    Ok((t * lml, grad))
}

/// Gradient of [`log_marginal_likelihood`] with respect to the log
/// hyperparameters.
pub fn lml_gradient(data: &GpDataView<'_>, theta: &KernelHyperparams) -> Result<[f64; 3]> {
    lml_and_gradient(data, theta).map(|(_, g)| g)
}

/// GP posterior predictive at `test_inputs`; tempering is ignored here.
pub fn gp_predict(
    data: &GpDataView<'_>,
    theta: &KernelHyperparams,
    test_inputs: &[f64],
) -> Result<PredictiveGaussian> {
    let factor = GpFactor::fit(data, theta)?;
    factor.predict(data.dim, data.inputs, theta, test_inputs)
}
