//! Flat-shaded top-down tabletop scenes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::mask::{Mask, RegionKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned rectangle, size in pixels.
    Rect { w: u32, h: u32 },
    Circle { r: u32 },
}

impl Shape {
    /// Footprint centred on pixel `(cx, cy)`.
    pub fn footprint(&self, dims: (u32, u32), cx: f64, cy: f64) -> Mask {
        match *self {
            Shape::Rect { w, h } => {
                let x0 = (cx - w as f64 / 2.0).round() as i64;
                let y0 = (cy - h as f64 / 2.0).round() as i64;
                Mask::rect(dims.0, dims.1, x0, y0, x0 + w as i64, y0 + h as i64)
            }
            Shape::Circle { r } => {
                let r2 = (r as f64 + 0.5).powi(2);
                Mask::from_fn(dims.0, dims.1, |x, y| {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    dx * dx + dy * dy <= r2
                })
            }
        }
    }
}

/// An extra object on the table. `gain` is the policy's response in meters per
/// step per unit of the region's pixel statistic, along the unit `direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub label: String,
    pub shape: Shape,
    pub color: Rgb,
    /// Pixel centre.
    pub center: [f64; 2],
    pub gain: f64,
    pub direction: [f64; 3],
}

/// A background patch (wall, cloth, counter) given as a pixel rectangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub label: String,
    pub color: Rgb,
    /// `[x0, y0, x1, y1)` in pixels.
    pub rect: [u32; 4],
    pub gain: f64,
    pub direction: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskObject {
    pub label: String,
    pub shape: Shape,
    pub color: Rgb,
    /// Nominal start position on the table, meters.
    pub position: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub label: String,
    pub color: Rgb,
    pub position: [f64; 2],
    pub radius_px: u32,
}

/// Servo and noise parameters of the simulated policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    pub servo_gain: f64,
    pub max_step: f64,
    pub hover_z: f64,
    pub grasp_z: f64,
    pub release_z: f64,
    pub align_tol: f64,
    /// Standard deviation of i.i.d. Gaussian noise on translational actions, meters.
    pub action_noise: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            servo_gain: 0.5,
            max_step: 0.01,
            hover_z: 0.06,
            grasp_z: 0.01,
            release_z: 0.03,
            align_tol: 0.004,
            action_noise: 1e-4,
        }
    }
}

/// Success and failure-mode thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    /// Gripper closure counts as a grasp within this distance of the object, meters.
    pub grasp_tol: f64,
    /// Release within this distance of the goal centre is a success, meters.
    pub success_tol: f64,
    /// Ticks holding the object without lifting it before `no_lift`.
    pub no_lift_ticks: usize,
    pub max_ticks: usize,
    /// Start offset of the object from its nominal position, meters.
    pub jitter: [f64; 2],
    pub gripper_threshold: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            grasp_tol: 0.02,
            success_tol: 0.01,
            no_lift_ticks: 15,
            max_ticks: 150,
            jitter: [0.01, 0.03],
            gripper_threshold: 0.7,
        }
    }
}

pub const MARKER_COLOR: Rgb = [20, 20, 20];
pub const MARKER_HALF: i64 = 3;
/// Detection confidence reported by the scene segmenter.
pub const SEGMENT_SCORE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub instruction: String,
    pub width: u32,
    pub height: u32,
    pub px_per_m: f64,
    pub table: Rgb,
    pub ee_start: [f64; 3],
    pub object: TaskObject,
    pub goal: Goal,
    #[serde(default)]
    pub distractors: Vec<Distractor>,
    #[serde(default)]
    pub tiles: Vec<Tile>,
    /// Labels the scripted VLM proposes that are not in the scene.
    #[serde(default)]
    pub phantom_labels: Vec<String>,
    /// Free half-width around the ee path that must stay clear, pixels.
    pub corridor_px: f64,
    /// Extra clearance kept around every distractor, pixels.
    pub clearance_px: u32,
    #[serde(default)]
    pub policy: PolicyParams,
    #[serde(default)]
    pub env: EnvParams,
}

/// A labelled ground-truth region of a rendered scene.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRegion {
    pub label: String,
    pub kind: RegionKind,
    pub mask: Mask,
    pub gain: f64,
    pub direction: [f64; 3],
    pub color: Rgb,
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

impl SceneSpec {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_slice(&std::fs::read(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn to_px(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.px_per_m, p[1] * self.px_per_m]
    }

    /// The same scene with every distraction removed: nominal conditions.
    pub fn nominal(&self) -> SceneSpec {
        SceneSpec {
            name: format!("{}-nominal", self.name),
            distractors: Vec::new(),
            tiles: Vec::new(),
            phantom_labels: Vec::new(),
            ..self.clone()
        }
    }

    /// Distance in pixels from `p` to the ee path (start, object, goal).
    pub fn corridor_distance(&self, p: [f64; 2]) -> f64 {
        let s = self.to_px([self.ee_start[0], self.ee_start[1]]);
        let o = self.to_px(self.object.position);
        let g = self.to_px(self.goal.position);
        seg_dist(p, s, o).min(seg_dist(p, o, g))
    }

    pub fn object_footprint(&self, pos: [f64; 2]) -> Mask {
        let c = self.to_px(pos);
        self.object.shape.footprint(self.dims(), c[0], c[1])
    }

    pub fn distractor_footprint(&self, d: &Distractor) -> Mask {
        d.shape.footprint(self.dims(), d.center[0], d.center[1])
    }

    pub fn tile_footprint(&self, t: &Tile) -> Mask {
        let [x0, y0, x1, y1] = t.rect;
        Mask::rect(self.width, self.height, x0 as i64, y0 as i64, x1 as i64, y1 as i64)
    }

    fn goal_footprint(&self) -> Mask {
        let c = self.to_px(self.goal.position);
        Shape::Circle { r: self.goal.radius_px }.footprint(self.dims(), c[0], c[1])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scene(format!("{}: {m}", self.name)));
        if self.width == 0 || self.height == 0 || !(self.px_per_m > 0.0) {
            return bad("canvas must be non-empty with positive scale".into());
        }
        let mut colors = vec![(self.table, "table".to_string()), (MARKER_COLOR, "marker".into())];
        colors.push((self.object.color, self.object.label.clone()));
        colors.push((self.goal.color, self.goal.label.clone()));
        for t in &self.tiles {
            colors.push((t.color, t.label.clone()));
        }
        for d in &self.distractors {
            colors.push((d.color, d.label.clone()));
        }
        for (i, (c, l)) in colors.iter().enumerate() {
            if let Some((_, other)) = colors[..i].iter().find(|(o, _)| o == c) {
                return bad(format!("`{l}` and `{other}` share color {c:?}"));
            }
        }
        let gains = self
            .distractors
            .iter()
            .map(|d| (d.gain, d.direction, &d.label))
            .chain(self.tiles.iter().map(|t| (t.gain, t.direction, &t.label)));
        for (g, dir, label) in gains {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("`{label}` gain {g} must be finite and >= 0"));
            }
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return bad(format!("`{label}` direction must be a unit vector"));
            }
        }
        let d = self.clearance_px;
        let mut occupied = self.goal_footprint();
        for t in &self.tiles {
            let m = self.tile_footprint(t);
            if m.is_empty() {
                return bad(format!("tile `{}` is off-canvas", t.label));
            }
            if let Some(p) = m.indices().find(|&i| self.corridor_distance(self.center_of(i)) <= self.corridor_px) {
                return bad(format!("tile `{}` enters the ee corridor at pixel {p}", t.label));
            }
            occupied = occupied.union(&m);
        }
        for dis in &self.distractors {
            let m = self.distractor_footprint(dis);
            if m.is_empty() {
                return bad(format!("distractor `{}` is off-canvas", dis.label));
            }
            let grown = m.dilate(d);
            if grown.intersection_count(&occupied) > 0 {
                return bad(format!("distractor `{}` is within {d} px of another element", dis.label));
            }
            if grown.indices().any(|i| self.corridor_distance(self.center_of(i)) <= self.corridor_px) {
                return bad(format!("distractor `{}` enters the ee corridor", dis.label));
            }
            occupied = occupied.union(&grown);
        }
        Ok(())
    }

    fn center_of(&self, i: usize) -> [f64; 2] {
        let w = self.width as usize;
        [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5]
    }

    /// Ground-truth regions: distractors then tiles, in spec order.
    pub fn truth_regions(&self) -> Vec<TruthRegion> {
        let objects = self.distractors.iter().map(|d| TruthRegion {
            label: d.label.clone(),
            kind: RegionKind::Object,
            mask: self.distractor_footprint(d),
            gain: d.gain,
            direction: d.direction,
            color: d.color,
        });
        let backgrounds = self.tiles.iter().map(|t| TruthRegion {
            label: t.label.clone(),
            kind: RegionKind::Background,
            mask: self.tile_footprint(t),
            gain: t.gain,
            direction: t.direction,
            color: t.color,
        });
        objects.chain(backgrounds).collect()
    }

    /// Renders with the task object at `object` (meters) and the ee marker at `ee`.
    pub fn render(&self, object: [f64; 2], ee: [f64; 3]) -> Image {
        let mut img = Image::filled(self.width, self.height, self.table);
        let paint = |img: &mut Image, m: &Mask, c: Rgb| {
            for i in m.indices() {
                img.set_index(i, c);
            }
        };
        for t in &self.tiles {
            paint(&mut img, &self.tile_footprint(t), t.color);
        }
        paint(&mut img, &self.goal_footprint(), self.goal.color);
        for d in &self.distractors {
            paint(&mut img, &self.distractor_footprint(d), d.color);
        }
        paint(&mut img, &self.object_footprint(object), self.object.color);
        let c = self.to_px([ee[0], ee[1]]);
        let (cx, cy) = (c[0].floor() as i64, c[1].floor() as i64);
        let marker = Mask::rect(
            self.width,
            self.height,
            cx - MARKER_HALF,
            cy - MARKER_HALF,
            cx + MARKER_HALF + 1,
            cy + MARKER_HALF + 1,
        );
        paint(&mut img, &marker, MARKER_COLOR);
        img
    }

    /// Renders the initial frame (nominal object position, ee at start).
    pub fn render_initial(&self) -> Image {
        self.render(self.object.position, self.ee_start)
    }
}
