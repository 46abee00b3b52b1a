//! Boolean pixel masks, region labels, run-length transport and dilation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Row-major boolean raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Mask({}x{}, {} set)",
            self.width,
            self.height,
            self.count()
        )
    }
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width as usize * height as usize {
            return Err(Error::InvalidImage(format!(
                "mask {width}x{height} with {} bits",
                bits.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)`, clipped to the canvas.
    pub fn rect(width: u32, height: u32, x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        let mut m = Mask::empty(width, height);
        let cx = |v: i64| v.clamp(0, width as i64) as u32;
        let cy = |v: i64| v.clamp(0, height as i64) as u32;
        for y in cy(y0)..cy(y1) {
            for x in cx(x0)..cx(x1) {
                m.set(x, y, true);
            }
        }
        m
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn set_index(&mut self, i: usize, v: bool) {
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let w = self.width as usize;
        let mut bb: Option<(u32, u32, u32, u32)> = None;
        for i in self.indices() {
            let (x, y) = ((i % w) as u32, (i / w) as u32);
            bb = Some(match bb {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
        bb
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.dims(), other.dims());
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        assert_eq!(self.dims(), other.dims());
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn subtract(&self, other: &Mask) -> Mask {
        assert_eq!(self.dims(), other.dims());
        Mask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && !*b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn check_matches(&self, image: &Image) -> Result<()> {
        if self.dims() != image.dims() {
            return Err(Error::DimensionMismatch {
                mask_w: self.width,
                mask_h: self.height,
                image_w: image.width(),
                image_h: image.height(),
            });
        }
        Ok(())
    }

    /// Chebyshev dilation: a pixel is set iff some set pixel lies within `radius`
    /// in both axes. Computed as two separable running-window passes.
    pub fn dilate(&self, radius: u32) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width as usize, self.height as usize);
        let r = radius as usize;
        let mut rows = vec![false; w * h];
        let mut prefix = vec![0u32; w.max(h) + 1];
        for y in 0..h {
            for x in 0..w {
                prefix[x + 1] = prefix[x] + self.bits[y * w + x] as u32;
            }
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                rows[y * w + x] = prefix[hi] > prefix[lo];
            }
        }
        let mut out = vec![false; w * h];
        for x in 0..w {
            for y in 0..h {
                prefix[y + 1] = prefix[y] + rows[y * w + x] as u32;
            }
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r + 1).min(h);
                out[y * w + x] = prefix[hi] > prefix[lo];
            }
        }
        Mask {
            width: self.width,
            height: self.height,
            bits: out,
        }
    }

    pub fn to_rle(&self) -> RleSpec {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u64;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        RleSpec {
            w: self.width,
            h: self.height,
            runs,
        }
    }
}

/// Run-length transport form: row-major, alternating false/true runs, first run false
/// (possibly zero-length).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleSpec {
    pub w: u32,
    pub h: u32,
    pub runs: Vec<u64>,
}

impl RleSpec {
    pub fn decode(&self) -> Result<Mask> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::MalformedRle(format!(
                "dimensions {}x{}",
                self.w, self.h
            )));
        }
        let total = self.w as u64 * self.h as u64;
        let sum = self
            .runs
            .iter()
            .try_fold(0u64, |acc, &r| acc.checked_add(r))
            .ok_or_else(|| Error::MalformedRle("run sum overflows".into()))?;
        if sum != total {
            return Err(Error::MalformedRle(format!(
                "runs sum to {sum}, expected {total}"
            )));
        }
        let mut bits = Vec::with_capacity(total as usize);
        let mut value = false;
        for &r in &self.runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        Ok(Mask {
            width: self.w,
            height: self.h,
            bits,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Object,
    Background,
}

impl RegionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionKind::Object => "object",
            RegionKind::Background => "background",
        }
    }
}

impl std::str::FromStr for RegionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(RegionKind::Object),
            "background" => Ok(RegionKind::Background),
            other => Err(Error::InvalidConfig(format!("unknown region kind `{other}`"))),
        }
    }
}

/// A labelled task-irrelevant region grounded to pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub label: String,
    pub kind: RegionKind,
    /// Distinguishes multiple groundings of the same label.
    pub instance: u32,
    pub score: f64,
    mask: Mask,
}

impl RegionMask {
    pub fn new(
        label: impl Into<String>,
        kind: RegionKind,
        instance: u32,
        score: f64,
        mask: Mask,
    ) -> Result<Self> {
        let label = label.into();
        if mask.is_empty() {
            return Err(Error::EmptyMask(label));
        }
        Ok(RegionMask {
            label,
            kind,
            instance,
            score: score.clamp(0.0, 1.0),
            mask,
        })
    }

    /// Stable identifier, `label#instance`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.label, self.instance)
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn dilated(&self, radius: u32) -> RegionMask {
        RegionMask {
            mask: self.mask.dilate(radius),
            ..self.clone()
        }
    }

    pub fn with_mask(&self, mask: Mask) -> Result<RegionMask> {
        RegionMask::new(self.label.clone(), self.kind, self.instance, self.score, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_2x2(bits: [bool; 4]) -> Mask {
        Mask::new(2, 2, bits.to_vec()).unwrap()
    }

    #[test]
    fn rle_all_true_and_all_false() {
        assert_eq!(mask_2x2([true; 4]).to_rle().runs, vec![0, 4]);
        assert_eq!(mask_2x2([false; 4]).to_rle().runs, vec![4]);
    }

    #[test]
    fn rle_single_pixel_row_major() {
        // (x=1, y=0) is row-major index 1
        let m = mask_2x2([false, true, false, false]);
        assert_eq!(m.to_rle().runs, vec![1, 1, 2]);
    }

    #[test]
    fn rle_decode_cases() {
        let all = RleSpec { w: 2, h: 2, runs: vec![0, 4] }.decode().unwrap();
        assert_eq!(all, Mask::full(2, 2));
        let none = RleSpec { w: 2, h: 2, runs: vec![4] }.decode().unwrap();
        assert!(none.is_empty());
        assert!(RegionMask::new("x", RegionKind::Object, 0, 1.0, none).is_err());
        let bad = RleSpec { w: 2, h: 2, runs: vec![1, 1, 3] }.decode();
        assert!(matches!(bad, Err(Error::MalformedRle(_))));
    }

    #[test]
    fn rle_json_shape() {
        let j = serde_json::to_string(&mask_2x2([false, true, false, false]).to_rle()).unwrap();
        assert_eq!(j, r#"{"w":2,"h":2,"runs":[1,1,2]}"#);
    }

    #[test]
    fn dilate_center_pixel() {
        let mut m = Mask::empty(5, 5);
        m.set(2, 2, true);
        let d = m.dilate(1);
        assert_eq!(d, Mask::rect(5, 5, 1, 1, 4, 4));
        assert_eq!(m.dilate(0), m);
    }

    #[test]
    fn dilate_two_pixels_three_apart() {
        // pixels at x=1 and x=4 on a 7x3 canvas, middle row
        let mut m = Mask::empty(7, 3);
        m.set(1, 1, true);
        m.set(4, 1, true);
        let d = m.dilate(1);
        let expected = Mask::rect(7, 3, 0, 0, 3, 3).union(&Mask::rect(7, 3, 3, 0, 6, 3));
        assert_eq!(d, expected);
        // the two blocks are 3 wide each: columns 0..=2 and 3..=5, column 6 untouched
        for y in 0..3 {
            assert!(!d.get(6, y));
        }
    }

    #[test]
    fn dilate_clips_at_border() {
        let mut m = Mask::empty(4, 4);
        m.set(0, 0, true);
        assert_eq!(m.dilate(2), Mask::rect(4, 4, 0, 0, 3, 3));
    }
}
