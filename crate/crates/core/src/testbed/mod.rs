//! Synthetic tabletop scenes whose policy sensitivities are known by
//! construction, used as ground truth for probing and intervention.

pub mod attention;
pub mod calibration;
pub mod env;
pub mod generate;
pub mod policy;
pub mod scene;

use std::sync::Arc;

pub use attention::ToyAttentionPolicy;
pub use env::{evaluate_success, FailureMode, Outcome, TestbedEnv, TickRecord};
pub use policy::SimPolicy;
pub use scene::{Distractor, SceneSpec, Shape, Tile, TruthRegion};

use crate::backends::stub::{OnionPeelInpaint, StubServer};
use crate::backends::{SegBackend, SegmentHit, VlmBackend};
use crate::error::Result;
use crate::image::Image;
use crate::regions::PromptTemplate;

/// Seed of the toy attention weights shared by every testbed server.
pub const ATTENTION_SEED: u64 = 7;

/// Scripted VLM naming every distractor and tile (plus phantom labels).
pub struct SceneVlm {
    answer: String,
}

impl SceneVlm {
    pub fn new(scene: &SceneSpec) -> Self {
        let mut objects: Vec<String> = Vec::new();
        for l in scene.distractors.iter().map(|d| &d.label).chain(&scene.phantom_labels) {
            if !objects.contains(l) {
                objects.push(l.clone());
            }
        }
        let mut backgrounds: Vec<String> = Vec::new();
        for t in &scene.tiles {
            if !backgrounds.contains(&t.label) {
                backgrounds.push(t.label.clone());
            }
        }
        let answer = serde_json::json!({
            "not_relevant_objects": objects,
            "not_relevant_backgrounds": backgrounds,
        })
        .to_string();
        SceneVlm { answer }
    }
}

impl VlmBackend for SceneVlm {
    fn propose(&self, _image: &Image, _instruction: &str, _template: &PromptTemplate) -> Result<String> {
        Ok(self.answer.clone())
    }
}

/// Segments each requested element as the pixels of its footprint that still
/// show its spec color.
pub struct SceneSegmenter {
    regions: Vec<TruthRegion>,
}

impl SceneSegmenter {
    pub fn new(scene: &SceneSpec) -> Self {
        SceneSegmenter {
            regions: scene.truth_regions(),
        }
    }
}

impl SegBackend for SceneSegmenter {
    fn segment(&self, image: &Image, labels: &[String], _box: f64, _text: f64) -> Result<Vec<SegmentHit>> {
        let mut hits = Vec::new();
        for r in self.regions.iter().filter(|r| labels.contains(&r.label)) {
            r.mask.check_matches(image)?;
            let mask = policy::color_pixels(image, &r.mask, r.color);
            if !mask.is_empty() {
                hits.push(SegmentHit {
                    label: r.label.clone(),
                    score: scene::SEGMENT_SCORE,
                    mask,
                });
            }
        }
        Ok(hits)
    }
}

/// Every backend the pipeline needs, driven by one scene.
pub fn stub_server(scene: &SceneSpec, horizon: usize) -> Result<StubServer> {
    Ok(StubServer {
        policy: Some(Arc::new(SimPolicy::new(scene.clone(), horizon)?)),
        vlm: Some(Arc::new(SceneVlm::new(scene))),
        seg: Some(Arc::new(SceneSegmenter::new(scene))),
        inpaint: Some(Arc::new(OnionPeelInpaint)),
        attn: Some(Arc::new(ToyAttentionPolicy::new(4, 4, 8, ATTENTION_SEED))),
    })
}
