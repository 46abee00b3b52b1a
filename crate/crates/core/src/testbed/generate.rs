//! Deterministic scene generation and gain tuning.
//!
//! A region's gain is chosen so that its probe perturbation moves the policy's
//! per-step offset by a fixed multiple of the threshold:
//! `g = target * T_a / ((T_a + 1) * |ds|)`, where `ds` is the change of the
//! region statistic under the probe perturbation, measured on the rendered frame.

use rand::Rng;

use super::policy::{background_statistic, object_statistic};
use super::scene::{Distractor, EnvParams, Goal, PolicyParams, SceneSpec, Shape, TaskObject, Tile};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::Rgb;
use crate::mask::RegionKind;
use crate::perturb::{blur_masked, noise_masked};
use crate::rng;

/// Sensitive regions are tuned to this multiple of their threshold.
pub const TARGET_MARGIN: f64 = 2.0;
/// Noise draws averaged when measuring a background's statistic shift.
const NOISE_DRAWS: u64 = 8;

const LABELS: [&str; 12] = [
    "orange", "blue mat", "spatula", "donut", "cup", "sponge", "banana", "toy car", "lemon", "bowl", "towel", "can",
];

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|u| (u * 255.0).round() as u8)
}

/// Shared layout: a 256 px, 0.512 m workspace with a fixed ee path.
pub fn base_scene(name: &str) -> SceneSpec {
    SceneSpec {
        name: name.into(),
        instruction: "put the carrot on the plate".into(),
        width: 256,
        height: 256,
        px_per_m: 500.0,
        table: [150, 120, 90],
        ee_start: [0.08, 0.25, 0.06],
        object: TaskObject {
            label: "carrot".into(),
            shape: Shape::Rect { w: 16, h: 16 },
            color: [240, 110, 20],
            position: [0.20, 0.30],
        },
        goal: Goal {
            label: "plate".into(),
            color: [235, 235, 228],
            position: [0.38, 0.18],
            radius_px: 14,
        },
        distractors: Vec::new(),
        tiles: Vec::new(),
        phantom_labels: Vec::new(),
        corridor_px: 26.0,
        clearance_px: 12,
        policy: PolicyParams::default(),
        env: EnvParams::default(),
    }
}

/// Change of a region's statistic under its probe perturbation, measured on the
/// initial frame. Backgrounds average several noise draws.
pub fn statistic_shift(scene: &SceneSpec, index: usize, cfg: &PipelineConfig) -> Result<f64> {
    let regions = scene.truth_regions();
    let r = regions
        .get(index)
        .ok_or_else(|| Error::Scene(format!("no region {index}")))?;
    let img = scene.render_initial();
    let px: Vec<usize> = r.mask.indices().collect();
    Ok(match r.kind {
        RegionKind::Object => {
            let blurred = blur_masked(&img, &r.mask, cfg.blur_kernel)?;
            (object_statistic(&img, &px, scene.table) - object_statistic(&blurred, &px, scene.table)).abs()
        }
        RegionKind::Background => {
            let base = background_statistic(&img, &px);
            let mut total = 0.0;
            for i in 0..NOISE_DRAWS {
                let noisy = noise_masked(&img, &r.mask, cfg.noise_sigma, rng::derive(0x5eed, "tune", i))?;
                total += (background_statistic(&noisy, &px) - base).abs();
            }
            total / NOISE_DRAWS as f64
        }
    })
}

/// Sets every positive gain so the region's probe deviation is
/// `TARGET_MARGIN * tau_kind`. Zero gains stay zero.
pub fn tune_gains(scene: &mut SceneSpec, cfg: &PipelineConfig) -> Result<()> {
    let ta = cfg.horizon.max(1) as f64;
    let steps = cfg.horizon as f64 + 1.0;
    let n_obj = scene.distractors.len();
    for i in 0..scene.truth_regions().len() {
        let (gain, kind) = if i < n_obj {
            (scene.distractors[i].gain, RegionKind::Object)
        } else {
            (scene.tiles[i - n_obj].gain, RegionKind::Background)
        };
        if gain == 0.0 {
            continue;
        }
        let ds = statistic_shift(scene, i, cfg)?;
        if ds <= 1e-6 {
            return Err(Error::Scene(format!("region {i} barely responds to its perturbation")));
        }
        let g = TARGET_MARGIN * cfg.tau(kind) * ta / (steps * ds);
        if i < n_obj {
            scene.distractors[i].gain = g;
        } else {
            scene.tiles[i - n_obj].gain = g;
        }
    }
    Ok(())
}

fn unit_xy(r: &mut impl Rng) -> [f64; 3] {
    let a = r.random_range(0.0..std::f64::consts::TAU);
    [a.cos(), a.sin(), 0.0]
}

/// The standard distractor scene: six objects (four sensitive) and a saturated
/// wall plus a neutral counter strip.
pub fn standard_scene(cfg: &PipelineConfig) -> Result<SceneSpec> {
    let mut s = base_scene("standard");
    let d = |label: &str, shape: Shape, color: Rgb, center: [f64; 2], sensitive: bool, dir_deg: f64| Distractor {
        label: label.into(),
        shape,
        color,
        center,
        gain: if sensitive { 1.0 } else { 0.0 },
        direction: [dir_deg.to_radians().cos(), dir_deg.to_radians().sin(), 0.0],
    };
    s.distractors = vec![
        d("orange", Shape::Circle { r: 11 }, [250, 150, 0], [40.0, 60.0], true, 100.0),
        d("blue mat", Shape::Rect { w: 30, h: 20 }, [30, 60, 220], [200.0, 190.0], true, 200.0),
        d("spatula", Shape::Rect { w: 28, h: 10 }, [200, 30, 160], [110.0, 60.0], true, -60.0),
        d("donut", Shape::Circle { r: 10 }, [240, 200, 40], [150.0, 200.0], false, 0.0),
        d("cup", Shape::Rect { w: 16, h: 18 }, [40, 180, 70], [235.0, 140.0], true, 160.0),
        d("cup", Shape::Rect { w: 14, h: 16 }, [90, 200, 210], [60.0, 205.0], false, 0.0),
    ];
    s.tiles = vec![
        Tile {
            label: "wall".into(),
            color: [40, 90, 230],
            rect: [0, 0, 256, 24],
            gain: 1.0,
            direction: [0.0, 1.0, 0.0],
        },
        Tile {
            label: "counter".into(),
            color: [128, 124, 118],
            rect: [0, 236, 256, 256],
            gain: 0.0,
            direction: [1.0, 0.0, 0.0],
        },
    ];
    s.phantom_labels = vec!["wooden spoon".into()];
    s.validate()?;
    tune_gains(&mut s, cfg)?;
    Ok(s)
}

/// Randomized probe scene `index`: 3-6 distractors and up to two tiles, each
/// sensitive or inert by coin flip (at least one of each among distractors).
pub fn probe_scene(index: u64, cfg: &PipelineConfig) -> Result<SceneSpec> {
    let mut r = rng::rng_for(rng::derive(0x5CE4E, "probe-scene", index));
    let mut s = base_scene(&format!("probe-{index:02}"));
    let mut used: Vec<Rgb> = vec![s.table, s.object.color, s.goal.color, super::scene::MARKER_COLOR];
    let mut fresh = |r: &mut rand_chacha::ChaCha8Rng, sat: (f64, f64)| loop {
        let c = hsv(r.random_range(0.0..360.0), r.random_range(sat.0..sat.1), r.random_range(0.55..0.95));
        let far = used
            .iter()
            .all(|u| (0..3).map(|k| (u[k] as i32 - c[k] as i32).abs()).sum::<i32>() > 60);
        if far {
            used.push(c);
            return c;
        }
    };
    for (label, rect) in [("wall", [0, 0, 256, 24]), ("counter", [0, 236, 256, 256])] {
        if r.random_bool(0.5) {
            let sensitive = r.random_bool(0.5);
            let color = if sensitive || r.random_bool(0.5) {
                fresh(&mut r, (0.6, 0.9))
            } else {
                fresh(&mut r, (0.0, 0.15))
            };
            s.tiles.push(Tile {
                label: label.into(),
                color,
                rect,
                gain: if sensitive { 1.0 } else { 0.0 },
                direction: unit_xy(&mut r),
            });
        }
    }
    let n = r.random_range(3..=6);
    let mut labels: Vec<&str> = LABELS.to_vec();
    for i in 0..n {
        let label = labels.remove(r.random_range(0..labels.len()));
        let sensitive = match i {
            0 => true,
            1 => false,
            _ => r.random_bool(0.5),
        };
        let shape = if r.random_bool(0.5) {
            Shape::Rect {
                w: r.random_range(14..=28),
                h: r.random_range(10..=24),
            }
        } else {
            Shape::Circle { r: r.random_range(7..=12) }
        };
        let color = fresh(&mut r, (0.55, 1.0));
        let direction = unit_xy(&mut r);
        let mut placed = false;
        for _ in 0..2000 {
            let center = [r.random_range(8.0..248.0), r.random_range(30.0..226.0)];
            s.distractors.push(Distractor {
                label: label.into(),
                shape,
                color,
                center: center.map(|v: f64| v.round()),
                gain: if sensitive { 1.0 } else { 0.0 },
                direction,
            });
            if s.validate().is_ok() {
                placed = true;
                break;
            }
            s.distractors.pop();
        }
        if !placed {
            return Err(Error::Scene(format!("could not place distractor {i} in scene {index}")));
        }
    }
    tune_gains(&mut s, cfg)?;
    Ok(s)
}
