//! Online mixture-of-experts Gaussian process regression.
//!
//! This crate fits a mixture of independent GP experts to streaming
//! regression data. Inputs are clustered with a Dirichlet-process mixture of
//! Gaussians (conjugate normal-inverse-Wishart model, Chinese restaurant
//! process assignments), each cluster gets its own RBF-kernel GP with
//! hyperparameters fit by marginal-likelihood ascent, and a sequential Monte
//! Carlo sampler carries several partition hypotheses ("particles") in
//! parallel, reweighting and resampling them as batches arrive. Prediction
//! averages the per-particle mixtures by particle weight.
//!
//! A bandit layer reuses kernel hyperparameters harvested from a previous
//! fit: instead of gradient optimization, each cluster picks the pooled
//! configuration ("arm") with the highest marginal likelihood, optionally
//! growing the pool when a fresh fit beats every arm.
//!
//! The crate is `no_std` (with `alloc`); anything that needs an operating
//! system — file formats, the CLI, thread pools, wall-clock timing — lives in
//! the companion `gpmoe-cli` crate. Parallelism is injected through the
//! [`exec::Executor`] trait so the core stays free of threading primitives
//! while keeping results bit-identical for any worker count.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bandit;
pub mod crp;
pub mod engine;
pub mod exec;
pub mod kernel;
pub mod math;
pub mod optimize;
pub mod particle;
pub mod rng;

use alloc::string::String;

// Matrix types appear in this crate's public API.
pub use nalgebra;

pub use bandit::{harvest_arms, select_arm, Arm, ArmPool, ArmProvenance};
pub use crp::{crp_assignment_logprobs, niw_posterior, sample_assignment, ClusterStats, MvtParams, NiwParams};
pub use engine::{effective_sample_size, Batch, EngineConfig, Ensemble, EnsemblePrediction, StepReport};
pub use exec::{Executor, SerialExecutor};
pub use kernel::{gp_predict, log_marginal_likelihood, lml_gradient, rbf_covariance, GpDataView, KernelHyperparams, PredictiveGaussian};
pub use optimize::{optimize_hyperparams, OptimizeOutcome, OptimizerConfig};
pub use particle::{ExpertState, Particle};

/// Error type shared by every module in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// The caller handed over something malformed (dimension mismatch,
    /// empty data where points are required, out-of-range setting).
    #[error("invalid input: {0}")]
    Input(String),
    /// Linear algebra gave up (e.g. a covariance that stays indefinite
    /// through the whole jitter ladder).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Operation requires state the object does not have yet.
    #[error("invalid state: {0}")]
    State(String),
}

pub type Result<T> = core::result::Result<T, Error>;
