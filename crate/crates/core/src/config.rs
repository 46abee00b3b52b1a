//! Pipeline configuration. Defaults reproduce the hardware settings: K = 5 samples,
//! T_a = 3, blur kernel 25, noise sigma sqrt(0.075) on the [0, 1] pixel scale,
//! thresholds 2 mm (objects) / 1 mm (backgrounds), mask dilation 10.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::WeightVector;
use crate::error::{Error, Result};
use crate::mask::RegionKind;

/// Object threshold obtained by scaling the offline third-quartile (~5 mm) down after a
/// few rollouts in the deployment scene.
pub const DEFAULT_TAU_OBJECT: f64 = 0.002;
/// Background threshold, same procedure with noise instead of blur.
pub const DEFAULT_TAU_BACKGROUND: f64 = 0.001;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSchedule {
    /// Probe once at t = 0 and reuse the flags for the whole episode.
    #[default]
    InitOnly,
    /// Re-probe at every chunk request.
    EveryChunk,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// One perturbed observation, K chunks from each of nominal and perturbed.
    #[default]
    KActions,
    /// K perturbed observations, one chunk each, paired with one nominal chunk.
    KObservations,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide the sum over T_a + 1 steps by K * T_a.
    #[default]
    Literal,
    /// Divide by K * (T_a + 1), i.e. a true per-step mean.
    PerStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCamConfig {
    /// Fraction of the score range retained at the top.
    pub fraction: f64,
    /// Gaussian smoothing kernel applied to the token map; 1 disables smoothing.
    pub smooth_kernel: u32,
    /// Minimum share of a region's pixels inside the attribution mask to flag it.
    pub overlap_frac: f64,
    /// Transformer layer requested from the attention backend.
    pub layer: u32,
}

impl Default for GradCamConfig {
    fn default() -> Self {
        GradCamConfig {
            fraction: 0.25,
            smooth_kernel: 3,
            overlap_frac: 0.5,
            layer: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    /// Action horizon T_a; chunks have T_a + 1 steps.
    pub horizon: usize,
    pub weights: WeightVector,
    pub tau_object: f64,
    pub tau_background: f64,
    pub blur_kernel: u32,
    pub noise_sigma: f64,
    pub dilation_radius: u32,
    pub probe_schedule: ProbeSchedule,
    pub sample_mode: SampleMode,
    pub normalization: Normalization,
    pub recolor_max_attempts: u32,
    pub rng_seed: u64,
    pub box_threshold: f64,
    pub text_threshold: f64,
    /// Upper bound on concurrent policy requests while probing. 1 keeps request
    /// order (and therefore transcripts) deterministic.
    pub max_in_flight: usize,
    pub gripper_threshold: f64,
    /// Optional per-channel warm filter applied to every observation first.
    pub warm_filter: Option<[f64; 3]>,
    pub gradcam: GradCamConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 5,
            horizon: 3,
            weights: WeightVector::translational(),
            tau_object: DEFAULT_TAU_OBJECT,
            tau_background: DEFAULT_TAU_BACKGROUND,
            blur_kernel: 25,
            noise_sigma: 0.075f64.sqrt(),
            dilation_radius: 10,
            probe_schedule: ProbeSchedule::InitOnly,
            sample_mode: SampleMode::KActions,
            normalization: Normalization::Literal,
            recolor_max_attempts: 10,
            rng_seed: 0,
            box_threshold: 0.4,
            text_threshold: 0.4,
            max_in_flight: 1,
            gripper_threshold: 0.7,
            warm_filter: None,
            gradcam: GradCamConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.blur_kernel < 3 || self.blur_kernel.is_multiple_of(2) {
            return bad(format!("blur_kernel {} must be odd and >= 3", self.blur_kernel));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.tau_object >= 0.0 && self.tau_background >= 0.0) {
            return bad("thresholds must be >= 0".into());
        }
        if self.recolor_max_attempts == 0 {
            return bad("recolor_max_attempts must be positive".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        for (name, t) in [("box_threshold", self.box_threshold), ("text_threshold", self.text_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("{name} {t} must lie in (0, 1)"));
            }
        }
        let g = &self.gradcam;
        if !(g.fraction > 0.0 && g.fraction < 1.0) {
            return bad(format!("gradcam.fraction {} must lie in (0, 1)", g.fraction));
        }
        if g.smooth_kernel == 0 || g.smooth_kernel.is_multiple_of(2) {
            return bad(format!("gradcam.smooth_kernel {} must be odd", g.smooth_kernel));
        }
        if let Some(gains) = self.warm_filter {
            if gains.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("warm filter gains must be > 0: {gains:?}"));
            }
        }
        Ok(())
    }

    pub fn tau(&self, kind: RegionKind) -> f64 {
        match kind {
            RegionKind::Object => self.tau_object,
            RegionKind::Background => self.tau_background,
        }
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon + 1
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
