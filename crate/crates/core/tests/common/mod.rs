#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use vlashield::config::PipelineConfig;
use vlashield::error::Result;
use vlashield::image::Image;
use vlashield::mask::Mask;
use vlashield::orchestrator::{run_batch, Backends, Episode, Method};
use vlashield::rng;
use vlashield::testbed::{stub_server, SceneSpec, TestbedEnv};

pub const INSTRUCTION: &str = "put the carrot on the plate";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn standard_scene() -> SceneSpec {
    SceneSpec::load(fixtures().join("scenes/standard.json")).expect("standard scene fixture")
}

pub fn probe_scenes() -> Vec<SceneSpec> {
    (0..20)
        .map(|i| SceneSpec::load(fixtures().join(format!("scenes/probe_{i:02}.json"))).expect("probe scene fixture"))
        .collect()
}

pub fn stub_backends(scene: &SceneSpec, horizon: usize) -> Backends {
    Backends::from_stub(&stub_server(scene, horizon).expect("stub server")).expect("stub backends")
}

pub fn episode_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive(base, "episode", i)).collect()
}

pub fn run_method(scene: &SceneSpec, backends: &Backends, cfg: &PipelineConfig, method: Method, seeds: &[u64]) -> Result<Vec<Episode>> {
    run_batch(|s| TestbedEnv::new(scene.clone(), s), backends, cfg, method, seeds, 1)
}

/// Union of the sensitive regions' masks grown by `radius`, per the step report.
pub fn allowed_edit_area(step: &vlashield::orchestrator::StepLog, dims: (u32, u32), radius: u32) -> Mask {
    let mut allowed = Mask::empty(dims.0, dims.1);
    for r in &step.regions {
        if step.report.is_sensitive(&r.id) {
            allowed = allowed.union(&r.mask.decode().expect("logged rle").dilate(radius));
        }
    }
    allowed
}

/// Pixels changed outside the allowed area, summed over every step of `ep`.
pub fn minimality_violations(ep: &Episode, radius: u32) -> usize {
    let mut bad = 0;
    for step in &ep.log.steps {
        let raw: &Image = ep.frame(&step.raw.path).expect("raw frame");
        let edited: &Image = ep.frame(&step.edited.path).expect("edited frame");
        let allowed = allowed_edit_area(step, raw.dims(), radius);
        bad += raw
            .diff_indices(edited)
            .into_iter()
            .filter(|&i| !allowed.get_index(i))
            .count();
    }
    bad
}

pub fn success_rate(eps: &[Episode]) -> f64 {
    eps.iter().filter(|e| e.log.success).count() as f64 / eps.len() as f64
}

pub fn shared<T>(v: T) -> Arc<T> {
    Arc::new(v)
}
