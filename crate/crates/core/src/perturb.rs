//! Masked image operators. Every operator leaves pixels outside its mask
//! bit-identical to the input.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::mask::Mask;
use crate::rng;

pub const DEFAULT_WARM_GAINS: [f64; 3] = [1.10, 1.00, 0.90];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Blur { kernel: u32 },
    Noise { sigma: f64 },
}

impl PerturbKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbKind::Blur { kernel } if kernel < 3 || kernel % 2 == 0 => {
                Err(Error::InvalidKernel(kernel))
            }
            PerturbKind::Noise { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidConfig(format!("noise sigma {sigma} must be > 0")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, image: &Image, mask: &Mask, seed: u64) -> Result<Image> {
        self.validate()?;
        match *self {
            PerturbKind::Blur { kernel } => blur_masked(image, mask, kernel),
            PerturbKind::Noise { sigma } => noise_masked(image, mask, sigma, seed),
        }
    }
}

/// Normalized 1-D Gaussian taps for an odd `kernel`, sigma = kernel / 6.
pub fn gaussian_taps(kernel: u32) -> Vec<f64> {
    let r = (kernel / 2) as i64;
    let sigma = kernel as f64 / 6.0;
    let raw: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

#[inline]
fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Gaussian blur of the whole image (edge-replicate padding) composited under `mask`.
///
/// Only the mask's bounding box grown by the kernel radius is convolved; values
/// inside the mask are identical to a full-image blur.
pub fn blur_masked(image: &Image, mask: &Mask, kernel: u32) -> Result<Image> {
    if kernel < 3 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidKernel(kernel));
    }
    mask.check_matches(image)?;
    let Some((bx0, by0, bx1, by1)) = mask.bbox() else {
        return Ok(image.clone());
    };
    let taps = gaussian_taps(kernel);
    let r = (kernel / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let clampx = |x: i64| x.clamp(0, w - 1) as u32;
    let clampy = |y: i64| y.clamp(0, h - 1) as u32;

    // Horizontal pass over rows needed by the vertical pass.
    let ry0 = by0 as i64 - r;
    let ry1 = by1 as i64 + r;
    let cols = (bx1 - bx0 + 1) as usize;
    let rows = (ry1 - ry0 + 1) as usize;
    let mut horiz = vec![[0f64; 3]; rows * cols];
    for (ri, y) in (ry0..=ry1).enumerate() {
        let yy = clampy(y);
        for (ci, x) in (bx0 as i64..=bx1 as i64).enumerate() {
            let mut acc = [0f64; 3];
            for (t, wt) in taps.iter().enumerate() {
                let p = image.get(clampx(x + t as i64 - r), yy);
                for c in 0..3 {
                    acc[c] += wt * p[c] as f64;
                }
            }
            horiz[ri * cols + ci] = acc;
        }
    }

    let mut out = image.clone();
    for y in by0..=by1 {
        for x in bx0..=bx1 {
            if !mask.get(x, y) {
                continue;
            }
            let ci = (x - bx0) as usize;
            let mut acc = [0f64; 3];
            for (t, wt) in taps.iter().enumerate() {
                let ri = (y as i64 - ry0) as usize + t - r as usize;
                let v = horiz[ri * cols + ci];
                for c in 0..3 {
                    acc[c] += wt * v[c];
                }
            }
            out.set(x, y, acc.map(to_byte));
        }
    }
    Ok(out)
}

/// Adds `N(0, sigma^2)` per channel on the `[0, 1]` scale inside `mask`, clamping
/// to `[0, 1]`. Draws are made in row-major pixel order, channel-minor.
pub fn noise_masked(image: &Image, mask: &Mask, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise sigma {sigma} must be > 0")));
    }
    mask.check_matches(image)?;
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = rng::rng_for(seed);
    let mut out = image.clone();
    for i in mask.indices() {
        let p = image.get_index(i);
        let q = p.map(|v| {
            let x = (v as f64 / 255.0 + normal.sample(&mut rng)).clamp(0.0, 1.0);
            to_byte(x * 255.0)
        });
        out.set_index(i, q);
    }
    Ok(out)
}

/// Per-channel gain, rounded and clamped to bytes.
pub fn warm_filter(image: &Image, gains: [f64; 3]) -> Result<Image> {
    if gains.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidConfig(format!("warm filter gains must be > 0: {gains:?}")));
    }
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| to_byte(v as f64 * gains[i % 3]))
        .collect();
    Image::new(image.width(), image.height(), data)
}

pub fn recolor_masked(image: &Image, mask: &Mask, color: Rgb) -> Result<Image> {
    mask.check_matches(image)?;
    let mut out = image.clone();
    for i in mask.indices() {
        out.set_index(i, color);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> Image {
        let mut img = Image::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) * 3 % 256) as u8]);
            }
        }
        img
    }

    fn assert_local(before: &Image, after: &Image, mask: &Mask) {
        for i in 0..before.pixel_count() {
            if !mask.get_index(i) {
                assert_eq!(before.get_index(i), after.get_index(i), "pixel {i} outside mask changed");
            }
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(40, 30, [128, 128, 128]);
        let mask = Mask::rect(40, 30, 5, 5, 30, 25);
        assert_eq!(blur_masked(&img, &mask, 25).unwrap(), img);
    }

    #[test]
    fn blur_empty_mask_is_identity() {
        let img = gradient(20, 20);
        assert_eq!(blur_masked(&img, &Mask::empty(20, 20), 25).unwrap(), img);
    }

    #[test]
    fn blur_rejects_even_kernel() {
        let img = gradient(5, 5);
        assert!(matches!(
            blur_masked(&img, &Mask::full(5, 5), 4),
            Err(Error::InvalidKernel(4))
        ));
    }

    #[test]
    fn blur_center_of_spike_matches_direct_convolution() {
        let img = Image::new(3, 1, vec![0, 0, 0, 255, 255, 255, 0, 0, 0]).unwrap();
        let out = blur_masked(&img, &Mask::full(3, 1), 3).unwrap();
        // Direct 2-D convolution with replicate padding; sigma = 0.5.
        let g = |d: f64| (-(d * d) / (2.0 * 0.25)).exp();
        let norm = g(-1.0) + g(0.0) + g(1.0);
        let vals = [0.0, 255.0, 0.0];
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let x = (1 + dx).clamp(0, 2) as usize;
                acc += g(dx as f64) * g(dy as f64) / (norm * norm) * vals[x];
            }
        }
        let center = out.get(1, 0)[0];
        assert!(center > 0 && center < 255);
        assert_eq!(center, acc.round() as u8);
    }

    #[test]
    fn blur_bbox_window_matches_full_blur() {
        let img = gradient(48, 40);
        let mask = Mask::rect(48, 40, 10, 12, 20, 18);
        let windowed = blur_masked(&img, &mask, 9).unwrap();
        let full = blur_masked(&img, &Mask::full(48, 40), 9).unwrap();
        for i in mask.indices() {
            assert_eq!(windowed.get_index(i), full.get_index(i));
        }
        assert_local(&img, &windowed, &mask);
    }

    #[test]
    fn noise_is_local_and_deterministic() {
        let img = gradient(30, 30);
        let mask = Mask::rect(30, 30, 3, 3, 17, 20);
        let a = noise_masked(&img, &mask, 0.2, 11).unwrap();
        let b = noise_masked(&img, &mask, 0.2, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, img);
        assert_local(&img, &a, &mask);
        assert_eq!(noise_masked(&img, &Mask::empty(30, 30), 0.2, 11).unwrap(), img);
    }

    #[test]
    fn tiny_noise_changes_nothing() {
        let img = gradient(30, 30);
        assert_eq!(noise_masked(&img, &Mask::full(30, 30), 1e-9, 3).unwrap(), img);
    }

    #[test]
    fn warm_filter_cases() {
        let img = Image::new(2, 1, vec![100, 100, 100, 250, 0, 0]).unwrap();
        assert_eq!(warm_filter(&img, [1.0, 1.0, 1.0]).unwrap(), img);
        let out = warm_filter(&img, DEFAULT_WARM_GAINS).unwrap();
        assert_eq!(out.get(0, 0), [110, 100, 90]);
        assert_eq!(out.get(1, 0), [255, 0, 0]);
    }

    #[test]
    fn recolor_checkerboard() {
        let img = gradient(9, 7);
        let mask = Mask::from_fn(9, 7, |x, y| (x + y) % 2 == 0);
        let out = recolor_masked(&img, &mask, [7, 7, 7]).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                let expected = if (x + y) % 2 == 0 { [7, 7, 7] } else { img.get(x, y) };
                assert_eq!(out.get(x, y), expected);
            }
        }
        let black = recolor_masked(&img, &Mask::full(9, 7), [0, 0, 0]).unwrap();
        assert_eq!(black, Image::filled(9, 7, [0, 0, 0]));
        assert_eq!(recolor_masked(&img, &Mask::empty(9, 7), [1, 2, 3]).unwrap(), img);
    }
}
