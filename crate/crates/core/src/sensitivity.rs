//! Visual sensitivity probing.
//!
//! A region is perturbed (blur for objects, noise for backgrounds) and the policy's
//! action chunks on the original and perturbed observations are compared with the
//! weighted action deviation
//!
//! ```text
//! delta = 1 / (K * T_a) * sum_k sum_{t=0..=T_a} sqrt(<w * da_t^k, da_t^k>)
//! ```
//!
//! Note the literal divisor: T_a + 1 terms per sample but `K * T_a` in the
//! denominator. [`Normalization::PerStep`] divides by `K * (T_a + 1)` instead, and
//! is used automatically when `T_a = 0`.

use rand::Rng;

use crate::action::{Action, ActionChunk, Observation, WeightVector};
use crate::backends::PolicyBackend;
use crate::config::{Normalization, PipelineConfig, SampleMode};
use crate::error::{Error, Result};
use crate::mask::{RegionKind, RegionMask};
use crate::perturb::PerturbKind;
use crate::report::{Perturbation, ReportEntry, SensitivityReport};
use crate::rng;

/// Odd kernel sizes drawn in K-observation mode: every odd value in `[15, 30]`.
pub const SAMPLED_KERNELS: [u32; 8] = [15, 17, 19, 21, 23, 25, 27, 29];

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub region: String,
    pub label: String,
    pub kind: RegionKind,
    pub delta: f64,
    pub samples_used: usize,
    pub chunk_len: usize,
    pub perturbation: Perturbation,
}

/// `sqrt(sum_i w_i (a_i - b_i)^2)`.
#[inline]
pub fn step_distance(a: &Action, b: &Action, w: &WeightVector) -> f64 {
    a.iter()
        .zip(b)
        .zip(w.get())
        .map(|((x, y), wi)| wi * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Weighted action deviation between paired chunk samples.
pub fn chunk_deviation(
    orig: &[ActionChunk],
    pert: &[ActionChunk],
    w: &WeightVector,
    horizon: usize,
    normalization: Normalization,
) -> Result<f64> {
    if orig.is_empty() || orig.len() != pert.len() {
        return Err(Error::ChunkShape(format!(
            "need K >= 1 paired samples, got {} nominal and {} perturbed",
            orig.len(),
            pert.len()
        )));
    }
    let len = horizon + 1;
    if let Some(bad) = orig.iter().chain(pert).find(|c| c.len() != len) {
        return Err(Error::ChunkShape(format!(
            "expected chunks of {len} steps (T_a = {horizon}), got {}",
            bad.len()
        )));
    }
    let divisor = match normalization {
        Normalization::Literal if horizon == 0 => return Err(Error::DegenerateHorizon),
        Normalization::Literal => (orig.len() * horizon) as f64,
        Normalization::PerStep => (orig.len() * len) as f64,
    };
    let total: f64 = orig
        .iter()
        .zip(pert)
        .flat_map(|(a, b)| a.steps().iter().zip(b.steps()))
        .map(|(a, b)| step_distance(a, b, w))
        .sum();
    Ok(total / divisor)
}

/// Normalization actually used for a config: the literal divisor is undefined at
/// `T_a = 0`, where the per-step mean is substituted.
pub fn effective_normalization(cfg: &PipelineConfig) -> Normalization {
    if cfg.horizon == 0 {
        Normalization::PerStep
    } else {
        cfg.normalization
    }
}

pub fn perturbation_for(kind: RegionKind, cfg: &PipelineConfig) -> PerturbKind {
    match kind {
        RegionKind::Object => PerturbKind::Blur {
            kernel: cfg.blur_kernel,
        },
        RegionKind::Background => PerturbKind::Noise {
            sigma: cfg.noise_sigma,
        },
    }
}

fn annotate(err: Error, region: &str) -> Error {
    match err {
        Error::BackendUnavailable { reason, .. } => Error::BackendUnavailable {
            context: format!("region {region}"),
            reason,
        },
        other => other,
    }
}

fn nominal_samples(cfg: &PipelineConfig) -> usize {
    match cfg.sample_mode {
        SampleMode::KActions => cfg.k,
        SampleMode::KObservations => 1,
    }
}

/// Chunks on the unperturbed observation, shared by every region of one probe.
pub fn sample_nominal(
    policy: &dyn PolicyBackend,
    obs: &Observation,
    instruction: &str,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<ActionChunk>> {
    policy.predict(obs, instruction, nominal_samples(cfg), rng::derive(seed, "nominal", 0))
}

/// Probes one region against precomputed nominal chunks.
pub fn probe_with_nominal(
    policy: &dyn PolicyBackend,
    obs: &Observation,
    instruction: &str,
    region: &RegionMask,
    nominal: &[ActionChunk],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    let id = region.id();
    let base = perturbation_for(region.kind, cfg);
    let (orig, pert, perturbation): (Vec<ActionChunk>, Vec<ActionChunk>, Perturbation) =
        match cfg.sample_mode {
            SampleMode::KActions => {
                let image = base.apply(&obs.image, region.mask(), rng::derive(seed, "perturb", 0))?;
                let chunks = policy
                    .predict(&obs.with_image(image), instruction, cfg.k, rng::derive(seed, "policy", 0))
                    .map_err(|e| annotate(e, &id))?;
                (nominal.to_vec(), chunks, Perturbation::Single(base))
            }
            SampleMode::KObservations => {
                let first = nominal
                    .first()
                    .ok_or_else(|| Error::ChunkShape("no nominal chunk".into()))?;
                let mut kernel_rng = rng::rng_for(rng::derive(seed, "kernels", 0));
                let mut used = Vec::with_capacity(cfg.k);
                let mut chunks = Vec::with_capacity(cfg.k);
                for i in 0..cfg.k as u64 {
                    let p = match base {
                        PerturbKind::Blur { .. } => PerturbKind::Blur {
                            kernel: SAMPLED_KERNELS[kernel_rng.random_range(0..SAMPLED_KERNELS.len())],
                        },
                        noise => noise,
                    };
                    let image = p.apply(&obs.image, region.mask(), rng::derive(seed, "perturb", i))?;
                    let mut c = policy
                        .predict(&obs.with_image(image), instruction, 1, rng::derive(seed, "policy", i))
                        .map_err(|e| annotate(e, &id))?;
                    if c.len() != 1 {
                        return Err(Error::ChunkShape(format!("asked for 1 chunk, got {}", c.len())));
                    }
                    chunks.push(c.remove(0));
                    used.push(p);
                }
                (
                    vec![first.clone(); cfg.k],
                    chunks,
                    Perturbation::Sampled { perturbations: used },
                )
            }
        };
    let delta = chunk_deviation(&orig, &pert, &cfg.weights, cfg.horizon, effective_normalization(cfg))?;
    Ok(ProbeOutcome {
        region: id,
        label: region.label.clone(),
        kind: region.kind,
        delta,
        samples_used: cfg.k,
        chunk_len: cfg.chunk_len(),
        perturbation,
    })
}

/// Probes a single region, sampling its own nominal chunks.
pub fn probe_region(
    policy: &dyn PolicyBackend,
    obs: &Observation,
    instruction: &str,
    region: &RegionMask,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    let nominal = sample_nominal(policy, obs, instruction, cfg, seed).map_err(|e| annotate(e, &region.id()))?;
    probe_with_nominal(policy, obs, instruction, region, &nominal, cfg, rng::derive(seed, "region", 0))
}

/// Probes every region and flags those with `delta >= tau_kind`. Nominal chunks are
/// sampled once and shared; entries follow region order regardless of how many
/// probes run concurrently.
pub fn probe_all(
    policy: &dyn PolicyBackend,
    obs: &Observation,
    instruction: &str,
    regions: &[RegionMask],
    cfg: &PipelineConfig,
    seed: u64,
    probed_at: usize,
) -> Result<SensitivityReport> {
    let nominal = sample_nominal(policy, obs, instruction, cfg, seed)?;
    let run = |i: usize, r: &RegionMask| {
        probe_with_nominal(policy, obs, instruction, r, &nominal, cfg, rng::derive(seed, "region", i as u64))
    };
    let outcomes: Vec<Result<ProbeOutcome>> = if cfg.max_in_flight <= 1 || regions.len() <= 1 {
        regions.iter().enumerate().map(|(i, r)| run(i, r)).collect()
    } else {
        let mut out = Vec::with_capacity(regions.len());
        let indexed: Vec<(usize, &RegionMask)> = regions.iter().enumerate().collect();
        for batch in indexed.chunks(cfg.max_in_flight) {
            let results: Vec<Result<ProbeOutcome>> = std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|&(i, r)| s.spawn(move || run(i, r)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("probe worker panicked"))
                    .collect()
            });
            out.extend(results);
        }
        out
    };
    let mut entries = Vec::with_capacity(regions.len());
    for o in outcomes {
        let o = o?;
        let tau = cfg.tau(o.kind);
        entries.push(ReportEntry::new(
            o.region,
            o.label,
            o.kind,
            o.delta,
            tau,
            o.perturbation,
            o.samples_used,
            o.chunk_len,
        ));
    }
    Ok(SensitivityReport::new(probed_at, entries))
}
