//! Kinematic pick-and-place environment and its success criteria.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::grasp_distance;
use super::scene::SceneSpec;
use crate::action::{Action, Observation, RobotState, GRIPPER};
use crate::error::Result;
use crate::image::Image;
use crate::mask::Mask;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Gripper closed while away from the object.
    EarlyGrasp,
    /// The object was never grasped.
    MissedApproach,
    /// Grasped but held at table height.
    NoLift,
    Timeout,
}

impl FailureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureMode::EarlyGrasp => "early_grasp",
            FailureMode::MissedApproach => "missed_approach",
            FailureMode::NoLift => "no_lift",
            FailureMode::Timeout => "timeout",
        }
    }
}

/// State after one control tick.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub state: RobotState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub success: bool,
    pub failure_mode: Option<FailureMode>,
}

/// Object heights below this count as resting on the table, meters.
const LIFT_HEIGHT: f64 = 0.005;

fn dist2(a: [f64; 3], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Success iff the object is released within `success_tol` of the goal. Failures
/// are classified in priority order early grasp, missed approach, no lift, timeout.
pub fn evaluate_success(trajectory: &[TickRecord], scene: &SceneSpec) -> Outcome {
    let env = &scene.env;
    let mut early = false;
    let mut grasped = false;
    let mut low_run = 0usize;
    let mut no_lift = false;
    let mut prev: Option<&RobotState> = None;
    for rec in trajectory {
        let s = &rec.state;
        if let Some(p) = prev {
            if p.holding && !s.holding && dist2(s.object, scene.goal.position) <= env.success_tol {
                return Outcome {
                    success: true,
                    failure_mode: None,
                };
            }
            // A closure that did not produce a grasp happened away from the object.
            if s.gripper_closed && !p.gripper_closed && !s.holding {
                early = true;
            }
        }
        grasped |= s.holding;
        if s.holding && s.object[2] <= LIFT_HEIGHT {
            low_run += 1;
            no_lift |= low_run >= env.no_lift_ticks;
        } else {
            low_run = 0;
        }
        prev = Some(s);
    }
    let mode = if early {
        FailureMode::EarlyGrasp
    } else if !grasped {
        FailureMode::MissedApproach
    } else if no_lift {
        FailureMode::NoLift
    } else {
        FailureMode::Timeout
    };
    Outcome {
        success: false,
        failure_mode: Some(mode),
    }
}

pub struct TestbedEnv {
    scene: SceneSpec,
    state: RobotState,
    trajectory: Vec<TickRecord>,
    success: bool,
}

impl TestbedEnv {
    /// Resets to the scene's start with the object offset by a seeded 1-3 cm jitter.
    pub fn new(scene: SceneSpec, seed: u64) -> Result<Self> {
        scene.validate()?;
        let mut r = rng::rng_for(rng::derive(seed, "env-reset", 0));
        let angle = r.random_range(0.0..std::f64::consts::TAU);
        let radius = r.random_range(scene.env.jitter[0]..=scene.env.jitter[1]);
        let o = scene.object.position;
        let state = RobotState {
            ee: scene.ee_start,
            gripper_closed: false,
            object: [o[0] + radius * angle.cos(), o[1] + radius * angle.sin(), 0.0],
            holding: false,
        };
        Ok(TestbedEnv {
            scene,
            trajectory: vec![TickRecord { tick: 0, state }],
            state,
            success: false,
        })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn state(&self) -> RobotState {
        self.state
    }

    pub fn tick(&self) -> usize {
        self.trajectory.len() - 1
    }

    pub fn trajectory(&self) -> &[TickRecord] {
        &self.trajectory
    }

    pub fn render(&self) -> Image {
        self.scene.render([self.state.object[0], self.state.object[1]], self.state.ee)
    }

    pub fn observe(&self) -> Observation {
        Observation::with_state(self.render(), self.state)
    }

    pub fn done(&self) -> bool {
        self.success || self.tick() >= self.scene.env.max_ticks
    }

    /// Pixels the segmenter must never claim: the task object and goal.
    pub fn exclusion(&self) -> Mask {
        let c = self.scene.to_px(self.scene.goal.position);
        let goal = super::scene::Shape::Circle { r: self.scene.goal.radius_px }.footprint(self.scene.dims(), c[0], c[1]);
        self.scene
            .object_footprint([self.state.object[0], self.state.object[1]])
            .union(&goal)
    }

    pub fn step(&mut self, a: &Action) {
        let grasp_z = self.scene.policy.grasp_z;
        let prev = self.state;
        let s = &mut self.state;
        for c in 0..3 {
            s.ee[c] += a[c];
        }
        s.ee[2] = s.ee[2].max(0.0);
        let closed = a[GRIPPER] >= self.scene.env.gripper_threshold;
        if closed && !prev.gripper_closed && grasp_distance(s, grasp_z) <= self.scene.env.grasp_tol {
            s.holding = true;
        }
        if !closed && s.holding {
            s.holding = false;
            s.object = [s.ee[0], s.ee[1], 0.0];
            if dist2(s.object, self.scene.goal.position) <= self.scene.env.success_tol {
                self.success = true;
            }
        }
        s.gripper_closed = closed;
        if s.holding {
            s.object = [s.ee[0], s.ee[1], (s.ee[2] - grasp_z).max(0.0)];
        }
        let tick = self.trajectory.len();
        self.trajectory.push(TickRecord { tick, state: *s });
    }

    pub fn outcome(&self) -> Outcome {
        evaluate_success(&self.trajectory, &self.scene)
    }
}
