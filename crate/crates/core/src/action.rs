use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One end-effector command: `(dx, dy, dz, droll, dpitch, dyaw, gripper)`.
/// Translations in meters, rotations in radians, gripper in `[0, 1]`.
pub type Action = [f64; 7];

pub const GRIPPER: usize = 6;

/// A predicted sequence of `L >= 1` actions executed open-loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Action>", into = "Vec<Action>")]
pub struct ActionChunk {
    steps: Vec<Action>,
}

impl ActionChunk {
    pub fn new(steps: Vec<Action>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidChunk("chunk has no steps".into()));
        }
        for (t, a) in steps.iter().enumerate() {
            if let Some(v) = a.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidChunk(format!("step {t} has non-finite entry {v}")));
            }
            if !(0.0..=1.0).contains(&a[GRIPPER]) {
                return Err(Error::InvalidChunk(format!(
                    "step {t} gripper {} outside [0, 1]",
                    a[GRIPPER]
                )));
            }
        }
        Ok(ActionChunk { steps })
    }

    pub fn steps(&self) -> &[Action] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl TryFrom<Vec<Action>> for ActionChunk {
    type Error = Error;
    fn try_from(v: Vec<Action>) -> Result<Self> {
        ActionChunk::new(v)
    }
}

impl From<ActionChunk> for Vec<Action> {
    fn from(c: ActionChunk) -> Self {
        c.steps
    }
}

/// Nonnegative per-component weights of the action distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct WeightVector([f64; 7]);

impl WeightVector {
    pub fn new(w: [f64; 7]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(format!("weights must be finite and >= 0: {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidConfig("weights are all zero".into()));
        }
        Ok(WeightVector(w))
    }

    /// Indicator of the translational components.
    pub fn translational() -> Self {
        WeightVector([1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    }

    pub fn get(&self) -> &[f64; 7] {
        &self.0
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        WeightVector::new(self.0.map(|v| v * c))
    }
}

impl Default for WeightVector {
    fn default() -> Self {
        WeightVector::translational()
    }
}

impl TryFrom<[f64; 7]> for WeightVector {
    type Error = Error;
    fn try_from(w: [f64; 7]) -> Result<Self> {
        WeightVector::new(w)
    }
}

impl From<WeightVector> for [f64; 7] {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Proprioceptive side channel some policies accept next to the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    /// End-effector position, meters.
    pub ee: [f64; 3],
    pub gripper_closed: bool,
    /// Task-object position as tracked by the environment, meters.
    pub object: [f64; 3],
    pub holding: bool,
}

/// What a policy sees: the camera image plus an optional proprioceptive state.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: crate::image::Image,
    pub state: Option<RobotState>,
}

impl Observation {
    pub fn new(image: crate::image::Image) -> Self {
        Observation { image, state: None }
    }

    pub fn with_state(image: crate::image::Image, state: RobotState) -> Self {
        Observation {
            image,
            state: Some(state),
        }
    }

    /// Same state, different pixels.
    pub fn with_image(&self, image: crate::image::Image) -> Self {
        Observation {
            image,
            state: self.state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_validation() {
        assert!(ActionChunk::new(vec![]).is_err());
        assert!(ActionChunk::new(vec![[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.5]]).is_err());
        assert!(ActionChunk::new(vec![[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]]).is_err());
        assert!(ActionChunk::new(vec![[0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]]).is_ok());
    }

    #[test]
    fn weights_validation() {
        assert!(WeightVector::new([0.0; 7]).is_err());
        assert!(WeightVector::new([-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        let j = serde_json::to_string(&WeightVector::translational()).unwrap();
        assert_eq!(j, "[1.0,1.0,1.0,0.0,0.0,0.0,0.0]");
    }
}
