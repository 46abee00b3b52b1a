//! Calibration fixtures with prescribed per-environment deviations.
//!
//! Each frame carries its target deviation in the top-left pixel (tenths of a
//! millimetre, big-endian in R and G). [`MarkerPolicy`] moves along x while the
//! centre pixel of the probe block is intact and stands still once a
//! perturbation has touched it, so a probe of the block measures exactly the
//! encoded value.

use crate::action::{Action, ActionChunk, Observation};
use crate::backends::PolicyBackend;
use crate::calibrate::CalibrationEnv;
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::mask::{Mask, RegionKind, RegionMask};

pub const FRAME: u32 = 64;
pub const BLOCK: [i64; 4] = [24, 24, 40, 40];
pub const BLOCK_COLOR: Rgb = [30, 60, 220];
const TABLE: Rgb = [150, 120, 90];
const PROBE_PIXEL: (u32, u32) = (32, 32);

/// Largest encodable deviation, meters.
pub const MAX_DEVIATION: f64 = 65535.0 / 10_000.0;

fn decode(image: &Image) -> f64 {
    let p = image.get(0, 0);
    (p[0] as u32 * 256 + p[1] as u32) as f64 / 10_000.0
}

/// A frame whose probe deviation is `delta` meters, rounded to 0.1 mm.
pub fn marker_frame(delta: f64) -> Result<Image> {
    if !(0.0..=MAX_DEVIATION).contains(&delta) {
        return Err(Error::InvalidConfig(format!("deviation {delta} outside [0, {MAX_DEVIATION}]")));
    }
    let units = (delta * 10_000.0).round() as u32;
    let mut img = Image::filled(FRAME, FRAME, TABLE);
    for y in BLOCK[1]..BLOCK[3] {
        for x in BLOCK[0]..BLOCK[2] {
            img.set(x as u32, y as u32, BLOCK_COLOR);
        }
    }
    img.set(0, 0, [(units >> 8) as u8, (units & 255) as u8, 255]);
    Ok(img)
}

pub fn block_mask() -> Mask {
    Mask::rect(FRAME, FRAME, BLOCK[0], BLOCK[1], BLOCK[2], BLOCK[3])
}

/// One environment per deviation, ids `env_00`, `env_01`, ...
pub fn marker_dataset(deltas: &[f64], kind: RegionKind) -> Result<Vec<CalibrationEnv>> {
    deltas
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            Ok(CalibrationEnv {
                id: format!("env_{i:02}"),
                observation: Observation::new(marker_frame(d)?),
                instruction: "put the carrot on the plate".into(),
                regions: vec![RegionMask::new("block", kind, 0, 1.0, block_mask())?],
            })
        })
        .collect()
}

/// Emits `horizon + 1` identical x-steps of `d * T_a / (T_a + 1)`, with `d`
/// read from the frame, or zero steps once the block has been perturbed.
pub struct MarkerPolicy {
    pub horizon: usize,
}

impl PolicyBackend for MarkerPolicy {
    fn predict(&self, obs: &Observation, _instruction: &str, k: usize, _seed: u64) -> Result<Vec<ActionChunk>> {
        let img = &obs.image;
        if img.dims() != (FRAME, FRAME) {
            return Err(Error::InvalidImage(format!(
                "marker frames are {FRAME}x{FRAME}, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let intact = img.get(PROBE_PIXEL.0, PROBE_PIXEL.1) == BLOCK_COLOR;
        let ta = self.horizon as f64;
        let step = if !intact {
            0.0
        } else if self.horizon == 0 {
            decode(img)
        } else {
            decode(img) * ta / (ta + 1.0)
        };
        let a: Action = [step, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        (0..k).map(|_| ActionChunk::new(vec![a; self.horizon + 1])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::sensitivity::probe_region;

    #[test]
    fn probe_reads_back_the_encoded_deviation() {
        let cfg = PipelineConfig {
            k: 1,
            horizon: 1,
            ..Default::default()
        };
        let policy = MarkerPolicy { horizon: 1 };
        for env in marker_dataset(&[0.001, 0.0085, 0.012], RegionKind::Object).unwrap() {
            let want = decode(&env.observation.image);
            let o = probe_region(&policy, &env.observation, "", &env.regions[0], &cfg, 3).unwrap();
            assert_eq!(o.delta, want);
        }
    }
}
