//! Synthetic non-stationary regression data: piecewise periodic regimes on
//! a 1-D domain plus Gaussian noise.
//!
//! Defaults give a slow sine on [0,5) and a fast sine on [5,10):
//! f(x) = sin(0.6πx) then sin(4πx), noise σ = 1.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{CliError, Result};
use gpmoe_core::rng::derive_stream;

const STREAM_TRAIN_X: u64 = 101;
const STREAM_TRAIN_NOISE: u64 = 102;
const STREAM_TEST_X: u64 = 103;
const STREAM_TEST_NOISE: u64 = 104;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub seed: u64,
    pub domain: (f64, f64),
    /// Regime boundaries, strictly increasing, inside the domain.
    pub breakpoints: Vec<f64>,
    /// One frequency per regime; regime i uses sin(freq·π·x).
    pub frequencies: Vec<f64>,
    /// Sort each split by input (a time-ordered stream).
    pub sorted: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 100,
            noise_sd: 1.0,
            seed: 0,
            domain: (0.0, 10.0),
            breakpoints: vec![5.0],
            frequencies: vec![0.6, 4.0],
            sorted: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(CliError::input("need at least one training and one test point"));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(CliError::input("noise-sd must be non-negative"));
        }
        if !(self.domain.0 < self.domain.1) {
            return Err(CliError::input("domain must be an increasing interval"));
        }
        if self.frequencies.len() != self.breakpoints.len() + 1 {
            return Err(CliError::input(format!(
                "{} breakpoints need {} frequencies, got {}",
                self.breakpoints.len(),
                self.breakpoints.len() + 1,
                self.frequencies.len()
            )));
        }
        let mut prev = self.domain.0;
        for b in &self.breakpoints {
            if !(*b > prev && *b < self.domain.1) {
                return Err(CliError::input("breakpoints must increase strictly inside the domain"));
            }
            prev = *b;
        }
        Ok(())
    }

    /// Noise-free regime function.
    pub fn truth(&self, x: f64) -> f64 {
        let mut regime = 0;
        for b in &self.breakpoints {
            if x >= *b {
                regime += 1;
            }
        }
        (self.frequencies[regime] * core::f64::consts::PI * x).sin()
    }

    fn split(&self, n: usize, x_stream: u64, noise_stream: u64) -> Dataset {
        let mut xrng = derive_stream(self.seed, x_stream, 0, 0);
        let mut nrng = derive_stream(self.seed, noise_stream, 0, 0);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x = xrng.gen_range(self.domain.0..self.domain.1);
                let z: f64 = StandardNormal.sample(&mut nrng);
                (x, self.truth(x) + self.noise_sd * z)
            })
            .collect();
        if self.sorted {
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Dataset {
            dim: 1,
            x: pairs.iter().map(|p| p.0).collect(),
            y: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// Deterministic (train, test) draw for this spec.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        Ok((
            self.split(self.n_train, STREAM_TRAIN_X, STREAM_TRAIN_NOISE),
            self.split(self.n_test, STREAM_TEST_X, STREAM_TEST_NOISE),
        ))
    }
}
