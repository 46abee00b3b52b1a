//! Threshold calibration from an offline set of first observations: probe every
//! annotated region, then take the third quartile of the deviations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::action::{Observation, RobotState, WeightVector};
use crate::backends::PolicyBackend;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{RegionKind, RegionMask, RleSpec};
use crate::rng;
use crate::sensitivity::probe_region;

pub const CALIBRATION_QUANTILE: f64 = 0.75;
pub const CALIBRATION_SCHEMA: &str = "calibration/1";

/// Linear-interpolation quantile at rank `(n - 1) * q` of the sorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (v.len() - 1) as f64 * q;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// One environment's first observation with annotated regions.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationEnv {
    pub id: String,
    pub observation: Observation,
    pub instruction: String,
    pub regions: Vec<RegionMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub environment: String,
    pub region: String,
    pub label: String,
    pub kind: RegionKind,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema: String,
    pub kind: RegionKind,
    pub quantile: f64,
    /// Third quartile of all sample deltas.
    pub tau: f64,
    /// Manual scale applied for deployment (1 when not overridden).
    pub scale: f64,
    pub deployed_tau: f64,
    pub samples: Vec<CalibrationSample>,
}

impl CalibrationReport {
    /// Rescales the deployed threshold, e.g. to account for a workspace of
    /// different physical scale than the calibration data.
    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale {scale} must be positive")));
        }
        self.scale = scale;
        self.deployed_tau = self.tau * scale;
        Ok(self)
    }
}

fn probe_env(
    policy: &dyn PolicyBackend,
    env: &CalibrationEnv,
    cfg: &PipelineConfig,
    kind: RegionKind,
    seed: u64,
) -> Result<Vec<CalibrationSample>> {
    let env_seed = rng::derive(seed, &format!("env:{}", env.id), 0);
    let mut out = Vec::new();
    for (i, r) in env.regions.iter().enumerate().filter(|(_, r)| r.kind == kind) {
        let o = probe_region(
            policy,
            &env.observation,
            &env.instruction,
            r,
            cfg,
            rng::derive(env_seed, "region", i as u64),
        )?;
        out.push(CalibrationSample {
            environment: env.id.clone(),
            region: o.region,
            label: o.label,
            kind,
            delta: o.delta,
        });
    }
    Ok(out)
}

/// Probes every region of `kind` in every environment under the translational
/// weight vector and returns the third quartile of the deviations. Seeds derive
/// from environment ids, so the result does not depend on dataset order.
pub fn calibrate_threshold(
    policy: &dyn PolicyBackend,
    dataset: &[CalibrationEnv],
    cfg: &PipelineConfig,
    kind: RegionKind,
    seed: u64,
) -> Result<CalibrationReport> {
    let cfg = PipelineConfig {
        weights: WeightVector::translational(),
        ..cfg.clone()
    };
    let mut samples = Vec::new();
    for batch in dataset.chunks(cfg.max_in_flight.max(1)) {
        let results: Vec<Result<Vec<CalibrationSample>>> = if batch.len() == 1 {
            vec![probe_env(policy, &batch[0], &cfg, kind, seed)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|env| {
                        let cfg = &cfg;
                        s.spawn(move || probe_env(policy, env, cfg, kind, seed))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("calibration worker panicked"))
                    .collect()
            })
        };
        for r in results {
            samples.extend(r?);
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyCalibrationSet);
    }
    samples.sort_by(|a, b| (&a.environment, &a.region).cmp(&(&b.environment, &b.region)));
    let deltas: Vec<f64> = samples.iter().map(|s| s.delta).collect();
    let tau = quantile(&deltas, CALIBRATION_QUANTILE)?;
    Ok(CalibrationReport {
        schema: CALIBRATION_SCHEMA.into(),
        kind,
        quantile: CALIBRATION_QUANTILE,
        tau,
        scale: 1.0,
        deployed_tau: tau,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub label: String,
    pub kind: RegionKind,
    pub rle: RleSpec,
}

/// `meta.json` next to each environment's `obs.png`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub instruction: String,
    pub regions: Vec<RegionAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<RobotState>,
}

/// Reads `DIR/<env>/{obs.png, meta.json}` for every subdirectory, sorted by name.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<CalibrationEnv>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let env_dir = dir.join(&name);
        let meta_path = env_dir.join("meta.json");
        let png_path = env_dir.join("obs.png");
        if !meta_path.exists() || !png_path.exists() {
            return Err(Error::FixtureMissing(format!(
                "{} needs obs.png and meta.json",
                env_dir.display()
            )));
        }
        let meta: EnvMeta = serde_json::from_slice(&std::fs::read(&meta_path)?)?;
        let image = Image::load_png(&png_path)?;
        let mut counts = std::collections::BTreeMap::<String, u32>::new();
        let mut regions = Vec::with_capacity(meta.regions.len());
        for a in meta.regions {
            let mask = a.rle.decode()?;
            mask.check_matches(&image)?;
            let n = counts.entry(a.label.clone()).or_default();
            regions.push(RegionMask::new(a.label, a.kind, *n, 1.0, mask)?);
            *n += 1;
        }
        out.push(CalibrationEnv {
            id: name,
            observation: Observation { image, state: meta.state },
            instruction: meta.instruction,
            regions,
        });
    }
    Ok(out)
}

/// Writes environments in the layout [`load_dataset`] reads.
pub fn save_dataset(dir: impl AsRef<Path>, envs: &[CalibrationEnv]) -> Result<()> {
    for env in envs {
        let env_dir = dir.as_ref().join(&env.id);
        std::fs::create_dir_all(&env_dir)?;
        env.observation.image.save_png(env_dir.join("obs.png"))?;
        let meta = EnvMeta {
            instruction: env.instruction.clone(),
            regions: env
                .regions
                .iter()
                .map(|r| RegionAnnotation {
                    label: r.label.clone(),
                    kind: r.kind,
                    rle: r.mask().to_rle(),
                })
                .collect(),
            state: env.observation.state,
        };
        std::fs::write(env_dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_cases() {
        let v = [0.001, 0.002, 0.003, 0.004, 0.006, 0.008, 0.010, 0.012];
        assert!((quantile(&v, 0.75).unwrap() - 0.0085).abs() < 1e-15);
        assert_eq!(quantile(&[0.3], 0.4).unwrap(), 0.3);
        assert_eq!(quantile(&v, 0.0).unwrap(), 0.001);
        assert_eq!(quantile(&v, 1.0).unwrap(), 0.012);
        assert!(matches!(quantile(&[], 0.5), Err(Error::EmptyCalibrationSet)));
    }

    #[test]
    fn consecutive_millimetres_give_rank_interpolation() {
        let v: Vec<f64> = (1..=8).map(|i| i as f64 * 1e-3).collect();
        assert!((quantile(&v, 0.75).unwrap() - 0.00625).abs() < 1e-15);
    }
}
