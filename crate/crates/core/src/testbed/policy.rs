//! Simulated policy: a proportional pick-and-place servo on privileged state,
//! plus action offsets driven by pixel statistics of chosen regions.

use rand_distr::{Distribution, Normal};

use super::scene::SceneSpec;
use crate::action::{Action, ActionChunk, Observation, RobotState};
use crate::backends::PolicyBackend;
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::mask::{Mask, RegionKind};
use crate::rng;

/// Saturation below which a background patch exerts no pull.
pub const BACKGROUND_SATURATION_FLOOR: f64 = 0.25;

struct Term {
    kind: RegionKind,
    pixels: Vec<usize>,
    gain: f64,
    direction: [f64; 3],
}

pub struct SimPolicy {
    scene: SceneSpec,
    horizon: usize,
    terms: Vec<Term>,
}

/// Mean over `pixels` of the mean absolute channel difference from `reference`, on [0, 1].
pub fn object_statistic(image: &Image, pixels: &[usize], reference: Rgb) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let total: u64 = pixels
        .iter()
        .map(|&i| {
            let p = image.get_index(i);
            (0..3).map(|c| (p[c] as i64 - reference[c] as i64).unsigned_abs()).sum::<u64>()
        })
        .sum();
    total as f64 / (3.0 * 255.0 * pixels.len() as f64)
}

/// Excess HSV saturation of the region's mean color over the floor.
pub fn background_statistic(image: &Image, pixels: &[usize]) -> f64 {
    if pixels.is_empty() {
        return 0.0;
    }
    let mut sum = [0u64; 3];
    for &i in pixels {
        let p = image.get_index(i);
        for c in 0..3 {
            sum[c] += p[c] as u64;
        }
    }
    let mean = sum.map(|s| s as f64 / pixels.len() as f64);
    let max = mean.iter().cloned().fold(f64::MIN, f64::max);
    let min = mean.iter().cloned().fold(f64::MAX, f64::min);
    let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
    (sat - BACKGROUND_SATURATION_FLOOR).max(0.0)
}

/// Distance from the ee to the object's grasp point, `grasp_z` above its base.
pub fn grasp_distance(s: &RobotState, grasp_z: f64) -> f64 {
    let g = [s.object[0], s.object[1], s.object[2] + grasp_z];
    (0..3).map(|c| (s.ee[c] - g[c]).powi(2)).sum::<f64>().sqrt()
}

/// Where the servo is headed and what it does with the gripper on arrival.
fn servo_target(state: &RobotState, goal: [f64; 2], p: &super::scene::PolicyParams) -> ([f64; 3], f64) {
    let [ex, ey, ez] = state.ee;
    let aligned = |t: [f64; 2]| ((ex - t[0]).powi(2) + (ey - t[1]).powi(2)).sqrt() <= p.align_tol;
    if !state.holding {
        if state.gripper_closed {
            // Missed grasp: open and back off upward.
            return ([ex, ey, p.hover_z], 0.0);
        }
        let o = [state.object[0], state.object[1]];
        if !aligned(o) {
            return ([o[0], o[1], p.hover_z], 0.0);
        }
        if ez > p.grasp_z + 0.003 {
            return ([o[0], o[1], p.grasp_z], 0.0);
        }
        return ([o[0], o[1], p.grasp_z], 1.0);
    }
    if !aligned(goal) {
        if ez < p.hover_z - 0.005 {
            return ([ex, ey, p.hover_z], 1.0);
        }
        return ([goal[0], goal[1], p.hover_z], 1.0);
    }
    if ez > p.release_z + 0.003 {
        return ([goal[0], goal[1], p.release_z], 1.0);
    }
    ([goal[0], goal[1], p.release_z], 0.0)
}

impl SimPolicy {
    /// Policy for `scene` emitting chunks of `horizon + 1` steps.
    pub fn new(scene: SceneSpec, horizon: usize) -> Result<Self> {
        scene.validate()?;
        let terms = scene
            .truth_regions()
            .into_iter()
            .filter(|r| r.gain > 0.0)
            .map(|r| Term {
                kind: r.kind,
                pixels: r.mask.indices().collect(),
                gain: r.gain,
                direction: r.direction,
            })
            .collect();
        Ok(SimPolicy { scene, horizon, terms })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    /// Per-step translational offset induced by the image.
    pub fn offset(&self, image: &Image) -> [f64; 3] {
        let mut out = [0.0; 3];
        for t in &self.terms {
            let s = match t.kind {
                RegionKind::Object => object_statistic(image, &t.pixels, self.scene.table),
                RegionKind::Background => background_statistic(image, &t.pixels),
            };
            for c in 0..3 {
                out[c] += t.gain * s * t.direction[c];
            }
        }
        out
    }

    /// Noise-free servo rollout from `state`, assuming perfect execution.
    pub fn nominal_chunk(&self, state: Option<&RobotState>) -> Vec<Action> {
        let len = self.horizon + 1;
        let Some(state) = state else {
            return vec![[0.0; 7]; len];
        };
        let p = &self.scene.policy;
        let goal = self.scene.goal.position;
        let mut s = *state;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let (target, grip) = servo_target(&s, goal, p);
            let mut d = [0.0; 3];
            for c in 0..3 {
                d[c] = p.servo_gain * (target[c] - s.ee[c]);
            }
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > p.max_step {
                d.iter_mut().for_each(|v| *v *= p.max_step / norm);
            }
            out.push([d[0], d[1], d[2], 0.0, 0.0, 0.0, grip]);
            // Internal model of the step's effect.
            for c in 0..3 {
                s.ee[c] += d[c];
            }
            let closed = grip >= self.scene.env.gripper_threshold;
            if closed && !s.gripper_closed && !s.holding {
                s.holding = grasp_distance(&s, p.grasp_z) <= self.scene.env.grasp_tol;
            }
            if !closed {
                s.holding = false;
            }
            s.gripper_closed = closed;
            if s.holding {
                s.object = [s.ee[0], s.ee[1], (s.ee[2] - p.grasp_z).max(0.0)];
            }
        }
        out
    }
}

impl PolicyBackend for SimPolicy {
    fn predict(&self, obs: &Observation, _instruction: &str, k: usize, seed: u64) -> Result<Vec<ActionChunk>> {
        if obs.image.dims() != self.scene.dims() {
            return Err(Error::DimensionMismatch {
                mask_w: self.scene.width,
                mask_h: self.scene.height,
                image_w: obs.image.width(),
                image_h: obs.image.height(),
            });
        }
        let base = self.nominal_chunk(obs.state.as_ref());
        let offset = self.offset(&obs.image);
        let sigma = self.scene.policy.action_noise;
        let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::InvalidConfig(format!("action noise: {e}")))?;
        (0..k as u64)
            .map(|i| {
                let mut r = rng::rng_for(rng::derive(seed, "sim-noise", i));
                let steps = base
                    .iter()
                    .map(|a| {
                        let mut a = *a;
                        for c in 0..3 {
                            a[c] += offset[c];
                            if sigma > 0.0 {
                                a[c] += normal.sample(&mut r);
                            }
                        }
                        a
                    })
                    .collect();
                ActionChunk::new(steps)
            })
            .collect()
    }
}

/// Mask of pixels in `footprint` that still show exactly `color`.
pub fn color_pixels(image: &Image, footprint: &Mask, color: Rgb) -> Mask {
    let mut m = Mask::empty(image.width(), image.height());
    for i in footprint.indices() {
        if image.get_index(i) == color {
            m.set_index(i, true);
        }
    }
    m
}
