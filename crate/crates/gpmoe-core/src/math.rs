//! Small numeric helpers used across the crate.

#[allow(unused_imports)] use num_traits::Float; // float math in no_std builds

/// Natural log of 2π.
pub const LN_2PI: f64 = 1.8378770664093453;

/// Stable log(Σ exp(x_i)). Returns −∞ for an empty slice or when every
/// entry is −∞.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // +∞ dominates; all −∞ stays −∞.
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log density of a scalar Gaussian with mean `mu` and variance `var`.
pub fn normal_logpdf(x: f64, mu: f64, var: f64) -> f64 {
    let d = x - mu;
    -0.5 * (d * d / var + var.ln() + LN_2PI)
}

/// log Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Mean and population variance of a slice. Variance is 0 for n < 2.
pub fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logsumexp_matches_naive_when_safe() {
        let xs = [0.3, -1.2, 2.0];
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_relative_eq!(logsumexp(&xs), naive, max_relative = 1e-14);
    }

    #[test]
    fn logsumexp_handles_large_magnitudes() {
        let xs = [-1200.0, -1201.0];
        let expected = -1200.0 + (1.0 + (-1.0f64).exp()).ln();
        assert_relative_eq!(logsumexp(&xs), expected, max_relative = 1e-14);
    }

    #[test]
    fn logsumexp_all_neg_inf_is_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn normal_logpdf_standard_at_zero() {
        // log N(0; 0, 1) = -0.5 ln 2π
        assert_relative_eq!(normal_logpdf(0.0, 0.0, 1.0), -0.5 * LN_2PI, max_relative = 1e-15);
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..10u32 {
            let fact: f64 = (1..n).map(|k| k as f64).product();
            assert_relative_eq!(ln_gamma(n as f64), fact.ln(), max_relative = 1e-12);
        }
        // Γ(1/2) = √π
        assert_relative_eq!(ln_gamma(0.5), core::f64::consts::PI.sqrt().ln(), max_relative = 1e-12);
    }
}
