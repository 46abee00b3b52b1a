//! GradCAM-style attribution from cross-attention weights and their gradients.

use serde::{Deserialize, Serialize};

use crate::config::GradCamConfig;
use crate::error::{Error, Result};
use crate::mask::{Mask, RegionMask};
use crate::perturb::gaussian_taps;
use crate::report::{Perturbation, ReportEntry, SensitivityReport};

/// Head-major `H x J` attention weights `A` and gradients `dA`, already reduced
/// over task tokens. `J` must be a perfect square (a patch grid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensors {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub layer: u32,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "dA")]
    pub da: Vec<f64>,
}

fn isqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

impl AttentionTensors {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.j == 0 {
            return Err(Error::Shape(format!("H = {} and J = {} must be positive", self.h, self.j)));
        }
        if self.a.len() != self.h * self.j || self.da.len() != self.h * self.j {
            return Err(Error::Shape(format!(
                "expected {} x {} = {} entries, got A: {}, dA: {}",
                self.h,
                self.j,
                self.h * self.j,
                self.a.len(),
                self.da.len()
            )));
        }
        if isqrt(self.j).is_none() {
            return Err(Error::Shape(format!("J = {} is not a perfect square", self.j)));
        }
        if self.a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Shape("attention weights must be finite and >= 0".into()));
        }
        if self.da.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("gradients must be finite".into()));
        }
        Ok(())
    }
}

/// A real-valued raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} map needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(ScoreMap { width, height, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// `L_j = (1/H) sum_h dA[h][j] * A[h][j]`, reshaped to `sqrt(J) x sqrt(J)`.
pub fn gradcam_map(t: &AttentionTensors) -> Result<ScoreMap> {
    t.validate()?;
    let side = isqrt(t.j).expect("validated");
    let mut values = vec![0.0; t.j];
    for h in 0..t.h {
        let row = h * t.j;
        for (j, v) in values.iter_mut().enumerate() {
            *v += t.da[row + j] * t.a[row + j];
        }
    }
    let inv = 1.0 / t.h as f64;
    values.iter_mut().for_each(|v| *v *= inv);
    ScoreMap::new(side, side, values)
}

/// Separable Gaussian smoothing with edge-replicate padding; kernel 1 is identity.
pub fn smooth(map: &ScoreMap, kernel: u32) -> Result<ScoreMap> {
    if kernel.is_multiple_of(2) {
        return Err(Error::InvalidKernel(kernel));
    }
    if kernel == 1 {
        return Ok(map.clone());
    }
    let taps = gaussian_taps(kernel);
    let r = (taps.len() / 2) as i64;
    let (w, h) = (map.width as i64, map.height as i64);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) as usize] = taps
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let d = i as i64 - r;
                        let (sx, sy) = if horizontal {
                            ((x + d).clamp(0, w - 1), y)
                        } else {
                            (x, (y + d).clamp(0, h - 1))
                        };
                        t * src[(sy * w + sx) as usize]
                    })
                    .sum();
            }
        }
        out
    };
    let tmp = pass(&map.values, true);
    ScoreMap::new(map.width, map.height, pass(&tmp, false))
}

/// Bilinear resampling aligned on pixel centres, clamped at the borders.
pub fn upsample_bilinear(map: &ScoreMap, width: u32, height: u32) -> ScoreMap {
    let (w, h) = (width as usize, height as usize);
    let coord = |dst: usize, dst_len: usize, src_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..w).map(|x| coord(x, w, map.width)).collect();
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, h, map.height);
        for &(x0, x1, fx) in &cols {
            let top = map.get(x0, y0) * (1.0 - fx) + map.get(x1, y0) * fx;
            let bottom = map.get(x0, y1) * (1.0 - fx) + map.get(x1, y1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    ScoreMap { width: w, height: h, values }
}

/// Keeps the pixels scoring in the top `fraction` of the smoothed, upsampled
/// map's range: `value >= min + (1 - fraction) * (max - min)`.
pub fn attribution_mask(map: &ScoreMap, dims: (u32, u32), fraction: f64, smooth_kernel: u32) -> Result<Mask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("fraction {fraction} outside (0, 1)")));
    }
    let (lo, hi) = map.range();
    if lo == hi {
        return Err(Error::FlatAttribution);
    }
    let up = upsample_bilinear(&smooth(map, smooth_kernel)?, dims.0, dims.1);
    let (lo, hi) = up.range();
    if lo == hi {
        return Err(Error::FlatAttribution);
    }
    let cutoff = lo + (1.0 - fraction) * (hi - lo);
    Mask::new(dims.0, dims.1, up.values.iter().map(|&v| v >= cutoff).collect())
}

/// Flags regions whose pixels are at least `overlap_frac` covered by the attribution
/// mask. The report has the same shape as a probe report; a flat map flags nothing.
pub fn gradcam_sensitive_regions(
    t: &AttentionTensors,
    regions: &[RegionMask],
    dims: (u32, u32),
    cfg: &GradCamConfig,
    probed_at: usize,
) -> Result<SensitivityReport> {
    let map = gradcam_map(t)?;
    let mask = match attribution_mask(&map, dims, cfg.fraction, cfg.smooth_kernel) {
        Ok(m) => Some(m),
        Err(Error::FlatAttribution) => {
            log::warn!("flat attribution map; no region flagged");
            None
        }
        Err(e) => return Err(e),
    };
    let mut entries = Vec::with_capacity(regions.len());
    for r in regions {
        let overlap = match &mask {
            Some(m) => {
                if m.dims() != r.mask().dims() {
                    return Err(Error::DimensionMismatch {
                        mask_w: r.mask().width(),
                        mask_h: r.mask().height(),
                        image_w: m.width(),
                        image_h: m.height(),
                    });
                }
                m.intersection_count(r.mask()) as f64 / r.mask().count() as f64
            }
            None => 0.0,
        };
        entries.push(ReportEntry::new(
            r.id(),
            r.label.clone(),
            r.kind,
            overlap,
            cfg.overlap_frac,
            Perturbation::Attribution { fraction: cfg.fraction },
            0,
            0,
        ));
    }
    Ok(SensitivityReport::new(probed_at, entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::RegionKind;

    fn tensors() -> AttentionTensors {
        AttentionTensors {
            h: 2,
            j: 4,
            layer: 6,
            a: vec![0.4, 0.3, 0.2, 0.1, 0.9, 0.8, 0.7, 0.6],
            da: vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn two_head_map() {
        let m = gradcam_map(&tensors()).unwrap();
        assert_eq!((m.width, m.height), (2, 2));
        let want = [0.2, 0.15, 0.1, 0.05];
        for (g, w) in m.values.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let mut t = tensors();
        t.da = vec![0.0; 8];
        assert!(gradcam_map(&t).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_square_j_rejected() {
        let t = AttentionTensors { h: 1, j: 3, layer: 0, a: vec![0.1; 3], da: vec![0.0; 3] };
        assert!(matches!(gradcam_map(&t), Err(Error::Shape(_))));
    }

    #[test]
    fn top_quarter_of_four_cells() {
        let m = ScoreMap::new(2, 2, vec![0.2, 0.15, 0.1, 0.05]).unwrap();
        let mask = attribution_mask(&m, (2, 2), 0.25, 1).unwrap();
        assert_eq!(mask.bits(), &[true, false, false, false]);
    }

    #[test]
    fn constant_map_is_flat() {
        let m = ScoreMap::new(2, 2, vec![0.3; 4]).unwrap();
        assert!(matches!(attribution_mask(&m, (8, 8), 0.25, 3), Err(Error::FlatAttribution)));
    }

    #[test]
    fn identity_upsample() {
        let m = ScoreMap::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(upsample_bilinear(&m, 3, 2), m);
    }

    #[test]
    fn overlap_boundary_is_inclusive() {
        let t = AttentionTensors {
            h: 1,
            j: 4,
            layer: 0,
            a: vec![1.0, 0.0, 1.0, 0.0],
            da: vec![1.0, 1.0, 1.0, 1.0],
        };
        // Left column attended; region spans both columns of the top row.
        let half = RegionMask::new("mat", RegionKind::Background, 0, 1.0, Mask::rect(2, 2, 0, 0, 2, 1)).unwrap();
        let off = RegionMask::new("cup", RegionKind::Object, 0, 1.0, Mask::rect(2, 2, 1, 0, 2, 2)).unwrap();
        let cfg = GradCamConfig { smooth_kernel: 1, ..GradCamConfig::default() };
        let r = gradcam_sensitive_regions(&t, &[half, off], (2, 2), &cfg, 0).unwrap();
        assert!(r.entries[0].sensitive);
        assert_eq!(r.entries[0].score, 0.5);
        assert!(!r.entries[1].sensitive);
    }
}
