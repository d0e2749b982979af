//! Versioned, checksummed JSON persistence for fitted ensembles and arm
//! pools, plus the atomic file-write helper every artifact goes through.
//!
//! Files are a small envelope `{format, version, sha256, payload}`; the
//! checksum covers the exact payload bytes. Ensembles serialize their
//! absorbed data stream plus each particle's assignment history and
//! per-cluster hyperparameters; loading replays the history, which
//! reconstructs member data bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gpmoe_core::bandit::{Arm, ArmPool, ArmProvenance};
use gpmoe_core::crp::NiwParams;
use gpmoe_core::engine::{Batch, EngineConfig, Ensemble};
use gpmoe_core::kernel::KernelHyperparams;
use gpmoe_core::optimize::OptimizerConfig;
use gpmoe_core::particle::{Assignment, Particle};
use nalgebra::{DMatrix, DVector};

use crate::data::Normalization;
use crate::error::{CliError, Result};

pub const MODEL_FORMAT: &str = "gpmoe-model";
pub const ARMS_FORMAT: &str = "gpmoe-arms";
pub const SCHEMA_VERSION: u32 = 1;

/// Write via a temp file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().and_then(|e| e.to_str()).map(|e| format!("{e}.")).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(format!("renaming into {}", path.display()), e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Deserialize)]
struct EnvelopeIn<'a> {
    format: String,
    version: u32,
    sha256: String,
    #[serde(borrow)]
    payload: &'a serde_json::value::RawValue,
}

fn write_envelope(path: &Path, format: &str, payload_json: &str) -> Result<()> {
    let sha = sha256_hex(payload_json.as_bytes());
    let text = format!(
        "{{\"format\":\"{format}\",\"version\":{SCHEMA_VERSION},\"sha256\":\"{sha}\",\"payload\":{payload_json}}}\n"
    );
    atomic_write(path, text.as_bytes())
}

fn read_envelope<'a>(path: &Path, text: &'a str, expect_format: &str) -> Result<&'a str> {
    let env: EnvelopeIn<'a> = serde_json::from_str(text)
        .map_err(|e| CliError::input(format!("{}: malformed or truncated file: {e}", path.display())))?;
    if env.format != expect_format {
        return Err(CliError::input(format!(
            "{}: format '{}' where '{}' was expected",
            path.display(),
            env.format,
            expect_format
        )));
    }
    if env.version != SCHEMA_VERSION {
        return Err(CliError::input(format!(
            "{}: unsupported version {} (this build reads version {SCHEMA_VERSION})",
            path.display(),
            env.version
        )));
    }
    let raw = env.payload.get();
    if sha256_hex(raw.as_bytes()) != env.sha256 {
        return Err(CliError::input(format!("{}: checksum mismatch, file is corrupted", path.display())));
    }
    Ok(raw)
}

/// ±∞-tolerant log-weight encoding ("-inf" for eliminated particles).
mod log_weight_fmt {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Word(w) => match w.as_str() {
                "-inf" => Ok(f64::NEG_INFINITY),
                "inf" => Ok(f64::INFINITY),
                other => Err(serde::de::Error::custom(format!("unrecognized log weight '{other}'"))),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigDto {
    num_particles: usize,
    alpha: f64,
    minibatch: usize,
    resample_frac: f64,
    seed: u64,
    max_iters: usize,
    grad_tol: f64,
}

#[derive(Serialize, Deserialize)]
struct PriorDto {
    mu: Vec<f64>,
    lambda: f64,
    psi: Vec<f64>,
    nu: f64,
}

#[derive(Serialize, Deserialize)]
struct BatchDto {
    x: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ExpertDto {
    cluster: usize,
    theta: [f64; 3],
    cached_lml: f64,
}

#[derive(Serialize, Deserialize)]
struct ParticleDto {
    stream_id: u64,
    #[serde(with = "log_weight_fmt")]
    log_weight: f64,
    prev_total_lml: f64,
    failed: bool,
    assignment_log: Vec<(u64, usize, usize)>,
    experts: Vec<ExpertDto>,
}

#[derive(Serialize, Deserialize)]
struct ModelPayload {
    config: ConfigDto,
    prior: PriorDto,
    dim: usize,
    step_counter: u64,
    next_stream_id: u64,
    resample_count: u64,
    normalization: Option<Normalization>,
    data_log: Vec<BatchDto>,
    particles: Vec<ParticleDto>,
}

pub fn save_model(path: &Path, ens: &Ensemble, normalization: Option<Normalization>) -> Result<()> {
    let config = ens.config();
    let prior = ens.prior();
    let payload = ModelPayload {
        config: ConfigDto {
            num_particles: config.num_particles,
            alpha: config.alpha,
            minibatch: config.minibatch,
            resample_frac: config.resample_frac,
            seed: config.seed,
            max_iters: config.optimizer.max_iters,
            grad_tol: config.optimizer.grad_tol,
        },
        prior: PriorDto {
            mu: prior.mu.iter().copied().collect(),
            lambda: prior.lambda,
            psi: prior.psi.iter().copied().collect(),
            nu: prior.nu,
        },
        dim: ens.dim(),
        step_counter: ens.step_counter(),
        next_stream_id: ens.next_stream_id(),
        resample_count: ens.resample_count(),
        normalization,
        data_log: ens.data_log().iter().map(|b| BatchDto { x: b.x.clone(), y: b.y.clone() }).collect(),
        particles: ens
            .particles()
            .iter()
            .map(|p| ParticleDto {
                stream_id: p.stream_id,
                log_weight: p.log_weight,
                prev_total_lml: p.prev_total_lml(),
                failed: p.is_failed(),
                assignment_log: p.assignment_log.iter().map(|a| (a.batch, a.index, a.cluster)).collect(),
                experts: p
                    .experts
                    .iter()
                    .map(|(id, e)| ExpertDto {
                        cluster: *id,
                        theta: [e.theta.log_lengthscale, e.theta.log_signal_var, e.theta.log_noise_var],
                        cached_lml: e.cached_lml,
                    })
                    .collect(),
            })
            .collect(),
    };
    let payload_json = serde_json::to_string(&payload)
        .map_err(|e| CliError::input(format!("serializing model: {e}")))?;
    write_envelope(path, MODEL_FORMAT, &payload_json)
}

pub fn load_model(path: &Path) -> Result<(Ensemble, Option<Normalization>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let raw = read_envelope(path, &text, MODEL_FORMAT)?;
    let payload: ModelPayload = serde_json::from_str(raw)
        .map_err(|e| CliError::input(format!("{}: invalid model payload: {e}", path.display())))?;

    let dim = payload.dim;
    let prior = NiwParams::new(
        DVector::from_column_slice(&payload.prior.mu),
        payload.prior.lambda,
        DMatrix::from_column_slice(dim, dim, &payload.prior.psi),
        payload.prior.nu,
    )?;
    let config = EngineConfig {
        num_particles: payload.config.num_particles,
        alpha: payload.config.alpha,
        prior: Some(prior.clone()),
        optimizer: OptimizerConfig { max_iters: payload.config.max_iters, grad_tol: payload.config.grad_tol },
        minibatch: payload.config.minibatch,
        resample_frac: payload.config.resample_frac,
        seed: payload.config.seed,
    };
    let data_log: Vec<Batch> = payload
        .data_log
        .into_iter()
        .map(|b| Batch::new(dim, b.x, b.y).map_err(CliError::from))
        .collect::<Result<_>>()?;
    let batch_views: Vec<(&[f64], &[f64])> =
        data_log.iter().map(|b| (b.x.as_slice(), b.y.as_slice())).collect();

    let mut failed_indices = Vec::new();
    let mut particles = Vec::with_capacity(payload.particles.len());
    for (idx, pd) in payload.particles.into_iter().enumerate() {
        let log = pd
            .assignment_log
            .into_iter()
            .map(|(batch, index, cluster)| Assignment { batch, index, cluster })
            .collect();
        let params: BTreeMap<usize, (KernelHyperparams, f64)> = pd
            .experts
            .into_iter()
            .map(|e| {
                let theta = KernelHyperparams {
                    log_lengthscale: e.theta[0],
                    log_signal_var: e.theta[1],
                    log_noise_var: e.theta[2],
                };
                (e.cluster, (theta, e.cached_lml))
            })
            .collect();
        if pd.failed {
            failed_indices.push(idx);
        }
        particles.push(Particle::restore(
            dim,
            pd.stream_id,
            pd.log_weight,
            pd.prev_total_lml,
            log,
            &batch_views,
            &params,
        )?);
    }
    let mut ens = Ensemble::restore(
        config,
        prior,
        payload.step_counter,
        payload.next_stream_id,
        payload.resample_count,
        data_log,
        particles,
    )?;
    for idx in failed_indices {
        ens.fail_particle(idx)?;
    }
    Ok((ens, payload.normalization))
}

#[derive(Serialize, Deserialize)]
struct ArmDto {
    theta: [f64; 3],
    run_id: String,
    particle: usize,
    cluster: usize,
    harvest_lml: f64,
}

#[derive(Serialize, Deserialize)]
struct ArmsPayload {
    pool_version: u64,
    arms: Vec<ArmDto>,
}

pub fn save_arms(path: &Path, pool: &ArmPool) -> Result<()> {
    let payload = ArmsPayload {
        pool_version: pool.version,
        arms: pool
            .arms
            .iter()
            .map(|a| ArmDto {
                theta: [a.theta.log_lengthscale, a.theta.log_signal_var, a.theta.log_noise_var],
                run_id: a.provenance.run_id.clone(),
                particle: a.provenance.particle,
                cluster: a.provenance.cluster,
                harvest_lml: a.harvest_lml,
            })
            .collect(),
    };
    let payload_json =
        serde_json::to_string(&payload).map_err(|e| CliError::input(format!("serializing arms: {e}")))?;
    write_envelope(path, ARMS_FORMAT, &payload_json)
}

pub fn load_arms(path: &Path) -> Result<ArmPool> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let raw = read_envelope(path, &text, ARMS_FORMAT)?;
    let payload: ArmsPayload = serde_json::from_str(raw)
        .map_err(|e| CliError::input(format!("{}: invalid arm-pool payload: {e}", path.display())))?;
    let arms = payload
        .arms
        .into_iter()
        .map(|a| {
            KernelHyperparams::new(a.theta[0], a.theta[1], a.theta[2]).map(|theta| Arm {
                theta,
                provenance: ArmProvenance { run_id: a.run_id, particle: a.particle, cluster: a.cluster },
                harvest_lml: a.harvest_lml,
            })
        })
        .collect::<gpmoe_core::Result<Vec<Arm>>>()?;
    if arms.is_empty() {
        return Err(CliError::input(format!("{}: arm pool is empty", path.display())));
    }
    Ok(ArmPool { arms, version: payload.pool_version })
}
