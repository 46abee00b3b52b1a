//! Browser demo: probe a testbed scene for sensitive regions, threshold a GradCAM
//! attribution map, and preview the probe perturbations.
//!
//! [`Session`] holds the logic and is usable natively; [`Demo`] is its
//! wasm-bindgen wrapper. Frames cross the boundary as RGBA byte arrays.

use serde_json::json;
use wasm_bindgen::prelude::*;

use vlashield::action::Observation;
use vlashield::attribution::{attribution_mask, gradcam_map};
use vlashield::config::PipelineConfig;
use vlashield::image::{Image, Rgb};
use vlashield::mask::{Mask, RegionKind};
use vlashield::orchestrator::{byovla_step, Backends, Method, StepCache, StepOutput};
use vlashield::perturb::{blur_masked, noise_masked};
use vlashield::testbed::{stub_server, SceneSpec, TestbedEnv};

const STANDARD: &str = include_str!("../../core/fixtures/scenes/standard.json");

const PROBES: [&str; 4] = [
    include_str!("../../core/fixtures/scenes/probe_00.json"),
    include_str!("../../core/fixtures/scenes/probe_01.json"),
    include_str!("../../core/fixtures/scenes/probe_02.json"),
    include_str!("../../core/fixtures/scenes/probe_03.json"),
];

pub const SCENES: [&str; 5] = ["standard", "probe_00", "probe_01", "probe_02", "probe_03"];

const SENSITIVE_TINT: Rgb = [230, 40, 40];
const INERT_TINT: Rgb = [40, 200, 90];
const ATTRIBUTION_TINT: Rgb = [250, 200, 20];

fn scene_json(name: &str) -> Result<&'static str, String> {
    match name {
        "standard" => Ok(STANDARD),
        _ => name
            .strip_prefix("probe_")
            .and_then(|i| i.parse::<usize>().ok())
            .and_then(|i| PROBES.get(i).copied())
            .ok_or_else(|| format!("unknown scene `{name}`")),
    }
}

pub fn to_rgba(image: &Image) -> Vec<u8> {
    image.data().chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn outline(mask: &Mask) -> Mask {
    let (w, h) = mask.dims();
    Mask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0 || y == 0 || x + 1 == w || y + 1 == h || !mask.get(x - 1, y) || !mask.get(x + 1, y) || !mask.get(x, y - 1) || !mask.get(x, y + 1))
    })
}

/// Blends `color` into the masked pixels and draws the mask's outline solid.
pub fn tint(image: &mut Image, mask: &Mask, color: Rgb, alpha: f64) {
    for i in mask.indices() {
        let p = image.get_index(i);
        let q = std::array::from_fn(|c| ((1.0 - alpha) * p[c] as f64 + alpha * color[c] as f64).round() as u8);
        image.set_index(i, q);
    }
    for i in outline(mask).indices() {
        image.set_index(i, color);
    }
}

/// Scene, backends and the most recent probe.
pub struct Session {
    scene: SceneSpec,
    cfg: PipelineConfig,
    backends: Backends,
    obs: Observation,
    exclusion: Mask,
    last: Option<StepOutput>,
}

impl Session {
    pub fn new(scene: &str, seed: u64) -> Result<Session, String> {
        let scene: SceneSpec = serde_json::from_str(scene_json(scene)?).map_err(|e| e.to_string())?;
        // Probes run sequentially: there are no threads in the browser.
        let cfg = PipelineConfig {
            max_in_flight: 1,
            ..Default::default()
        };
        let server = stub_server(&scene, cfg.horizon).map_err(|e| e.to_string())?;
        let backends = Backends::from_stub(&server).map_err(|e| e.to_string())?;
        let env = TestbedEnv::new(scene.clone(), seed).map_err(|e| e.to_string())?;
        Ok(Session {
            obs: env.observe(),
            exclusion: env.exclusion(),
            scene,
            cfg,
            backends,
            last: None,
        })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn frame(&self) -> &Image {
        &self.obs.image
    }

    /// Runs proposal, grounding, probing and editing on the current frame.
    pub fn probe(&mut self, method: Method, seed: u64) -> Result<&StepOutput, String> {
        let mut cache = StepCache::default();
        let out = byovla_step(
            &self.backends,
            &self.obs,
            &self.scene.instruction,
            &mut cache,
            &self.cfg,
            method,
            0,
            seed,
            Some(&self.exclusion),
        )
        .map_err(|e| e.to_string())?;
        Ok(self.last.insert(out))
    }

    /// Report of the last probe as JSON, one entry per grounded region.
    pub fn report_json(&self) -> String {
        let Some(out) = &self.last else {
            return json!({ "entries": [] }).to_string();
        };
        let entries: Vec<_> = out
            .report
            .entries
            .iter()
            .map(|e| {
                json!({
                    "region": e.region,
                    "label": e.label,
                    "kind": e.kind.as_str(),
                    "score": e.score,
                    "threshold": e.threshold,
                    "sensitive": e.sensitive,
                })
            })
            .collect();
        let edits: Vec<_> = out
            .interventions
            .iter()
            .map(|r| json!({ "region": r.region, "attempts": r.attempts }))
            .collect();
        json!({ "entries": entries, "interventions": edits }).to_string()
    }

    /// Current frame with sensitive regions in red and the rest in green.
    pub fn sensitivity_overlay(&self) -> Image {
        let mut img = self.obs.image.clone();
        if let Some(out) = &self.last {
            for r in &out.regions {
                let color = if out.report.is_sensitive(&r.id()) { SENSITIVE_TINT } else { INERT_TINT };
                tint(&mut img, r.mask(), color, 0.45);
            }
        }
        img
    }

    /// Observation after the last probe's edits, or the raw frame.
    pub fn edited(&self) -> Image {
        self.last.as_ref().map_or_else(|| self.obs.image.clone(), |o| o.edited.clone())
    }

    /// Top-`fraction` attribution mask of the toy attention policy.
    pub fn gradcam_mask(&self, fraction: f64) -> Result<Mask, String> {
        let attn = self.backends.attn.as_ref().ok_or("no attention backend")?;
        let t = attn
            .attention(&self.obs.image, &self.scene.instruction, self.cfg.gradcam.layer)
            .map_err(|e| e.to_string())?;
        let map = gradcam_map(&t).map_err(|e| e.to_string())?;
        attribution_mask(&map, self.obs.image.dims(), fraction, self.cfg.gradcam.smooth_kernel).map_err(|e| e.to_string())
    }

    pub fn gradcam_overlay(&self, fraction: f64) -> Result<Image, String> {
        let mut img = self.obs.image.clone();
        tint(&mut img, &self.gradcam_mask(fraction)?, ATTRIBUTION_TINT, 0.5);
        Ok(img)
    }

    /// The probe perturbation of one ground-truth region: blur for objects,
    /// noise for backgrounds.
    pub fn perturb_preview(&self, region: usize, kernel: u32, sigma: f64, seed: u64) -> Result<Image, String> {
        let truth = self.scene.truth_regions();
        let r = truth.get(region).ok_or_else(|| format!("region {region} out of range ({} regions)", truth.len()))?;
        match r.kind {
            RegionKind::Object => blur_masked(&self.obs.image, &r.mask, kernel),
            RegionKind::Background => noise_masked(&self.obs.image, &r.mask, sigma, seed),
        }
        .map_err(|e| e.to_string())
    }

    pub fn region_labels(&self) -> Vec<String> {
        self.scene.truth_regions().into_iter().map(|r| format!("{} ({})", r.label, r.kind.as_str())).collect()
    }
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub fn scene_names() -> Vec<String> {
    SCENES.iter().map(|s| s.to_string()).collect()
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, seed: u64) -> Result<Demo, JsError> {
        Ok(Demo {
            inner: Session::new(scene, seed).map_err(js)?,
        })
    }

    pub fn width(&self) -> u32 {
        self.inner.frame().width()
    }

    pub fn height(&self) -> u32 {
        self.inner.frame().height()
    }

    pub fn instruction(&self) -> String {
        self.inner.scene.instruction.clone()
    }

    pub fn frame(&self) -> Vec<u8> {
        to_rgba(self.inner.frame())
    }

    pub fn region_labels(&self) -> Vec<String> {
        self.inner.region_labels()
    }

    /// `method` is `byovla`, `nosens` or `gradcam`; returns the report JSON.
    pub fn probe(&mut self, method: &str, seed: u64) -> Result<String, JsError> {
        let m: Method = method.parse().map_err(|e: vlashield::error::Error| js(e.to_string()))?;
        self.inner.probe(m, seed).map_err(js)?;
        Ok(self.inner.report_json())
    }

    pub fn sensitivity_overlay(&self) -> Vec<u8> {
        to_rgba(&self.inner.sensitivity_overlay())
    }

    pub fn edited(&self) -> Vec<u8> {
        to_rgba(&self.inner.edited())
    }

    pub fn gradcam(&self, fraction: f64) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.inner.gradcam_overlay(fraction).map_err(js)?))
    }

    pub fn perturb(&self, region: usize, kernel: u32, sigma: f64, seed: u64) -> Result<Vec<u8>, JsError> {
        Ok(to_rgba(&self.inner.perturb_preview(region, kernel, sigma, seed).map_err(js)?))
    }
}
