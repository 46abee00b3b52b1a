//! Image edits on sensitive task-irrelevant regions: objects are inpainted away,
//! backgrounds are recolored with a neutral color the policy is stable under.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::Observation;
use crate::backends::{InpaintBackend, PolicyBackend};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::mask::{Mask, RegionKind, RegionMask, RleSpec};
use crate::perturb::recolor_masked;
use crate::report::SensitivityReport;
use crate::rng;
use crate::sensitivity::probe_region;

pub const NEUTRAL_MAX_SATURATION: f64 = 0.2;
pub const NEUTRAL_VALUE_RANGE: (f64, f64) = (0.4, 0.9);

/// Fills masked pixels layer by layer from the outside in. Every pixel of a layer
/// takes the rounded mean of its already-filled 8-neighbours, all computed from the
/// state before the layer is written, so the result does not depend on traversal
/// order. A mask covering the whole image has nothing to fill from and is returned
/// unchanged.
pub fn onion_peel_fill(image: &Image, mask: &Mask) -> Result<Image> {
    mask.check_matches(image)?;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut out = image.clone();
    let mut filled: Vec<bool> = mask.bits().iter().map(|b| !b).collect();
    if !filled.iter().any(|&f| f) {
        warn!("onion-peel fill: mask covers the whole image, nothing to fill from");
        return Ok(out);
    }
    let neighbours = |i: usize| {
        let (x, y) = ((i as i64) % w, (i as i64) / w);
        (-1i64..=1)
            .flat_map(move |dy| (-1i64..=1).map(move |dx| (dx, dy)))
            .filter(|&(dx, dy)| dx != 0 || dy != 0)
            .map(move |(dx, dy)| (x + dx, y + dy))
            .filter(move |&(nx, ny)| nx >= 0 && ny >= 0 && nx < w && ny < h)
            .map(move |(nx, ny)| (ny * w + nx) as usize)
    };
    let mut frontier: Vec<usize> = mask
        .indices()
        .filter(|&i| neighbours(i).any(|n| filled[n]))
        .collect();
    let mut queued = vec![false; filled.len()];
    while !frontier.is_empty() {
        let values: Vec<Rgb> = frontier
            .iter()
            .map(|&i| {
                let mut sum = [0u32; 3];
                let mut n = 0u32;
                for j in neighbours(i).filter(|&j| filled[j]) {
                    let p = out.get_index(j);
                    for c in 0..3 {
                        sum[c] += p[c] as u32;
                    }
                    n += 1;
                }
                sum.map(|s| ((s + n / 2) / n) as u8)
            })
            .collect();
        for (&i, v) in frontier.iter().zip(&values) {
            out.set_index(i, *v);
            filled[i] = true;
        }
        let mut next = Vec::new();
        for &i in &frontier {
            for j in neighbours(i) {
                if !filled[j] && !queued[j] {
                    queued[j] = true;
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        frontier = next;
    }
    Ok(out)
}

/// Removes an object region: dilate, then fill via the backend (composited so
/// nothing outside the dilated mask changes) or the built-in onion-peel fill.
/// Returns the edited image and the dilated mask that bounds the edit.
pub fn inpaint_object(
    image: &Image,
    region: &RegionMask,
    cfg: &PipelineConfig,
    backend: Option<&dyn InpaintBackend>,
) -> Result<(Image, Mask)> {
    if region.kind != RegionKind::Object {
        return Err(Error::InvalidConfig(format!(
            "inpaint_object called on {} region `{}`",
            region.kind.as_str(),
            region.id()
        )));
    }
    region.mask().check_matches(image)?;
    let dilated = region.mask().dilate(cfg.dilation_radius);
    if let Some(b) = backend {
        match b.inpaint(image, &dilated, cfg.dilation_radius) {
            Ok(filled) if filled.dims() == image.dims() => {
                let mut out = image.clone();
                for i in dilated.indices() {
                    out.set_index(i, filled.get_index(i));
                }
                return Ok((out, dilated));
            }
            Ok(filled) => warn!(
                "inpaint backend returned {}x{} for a {}x{} image; using onion-peel fill",
                filled.width(),
                filled.height(),
                image.width(),
                image.height()
            ),
            Err(e) => warn!("inpaint backend failed ({e}); using onion-peel fill"),
        }
    }
    Ok((onion_peel_fill(image, &dilated)?, dilated))
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
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
    [r + m, g + m, b + m]
}

/// HSV saturation of a byte color, `(max - min) / max` (0 for black).
pub fn saturation(c: Rgb) -> f64 {
    let max = *c.iter().max().unwrap() as f64;
    let min = *c.iter().min().unwrap() as f64;
    if max == 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// A random low-saturation color: S <= 0.2 and V in [0.4, 0.9]. Draws that round
/// to a byte color outside those bounds are redrawn.
pub fn neutral_color(seed: u64) -> Rgb {
    let mut r = rng::rng_for(seed);
    loop {
        let h = r.random_range(0.0..360.0);
        let s = r.random_range(0.0..NEUTRAL_MAX_SATURATION);
        let v = r.random_range(NEUTRAL_VALUE_RANGE.0..=NEUTRAL_VALUE_RANGE.1);
        let c = hsv_to_rgb(h, s, v).map(|x| (x * 255.0).round().clamp(0.0, 255.0) as u8);
        let value = *c.iter().max().unwrap() as f64 / 255.0;
        if saturation(c) <= NEUTRAL_MAX_SATURATION
            && (NEUTRAL_VALUE_RANGE.0..=NEUTRAL_VALUE_RANGE.1).contains(&value)
        {
            return c;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recolored {
    pub image: Image,
    pub color: Rgb,
    pub attempts: u32,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecolorOutcome {
    Accepted(Recolored),
    /// No color passed within the attempt budget; carries the lowest-delta candidate.
    Exhausted(Recolored),
}

impl RecolorOutcome {
    pub fn result(&self) -> &Recolored {
        match self {
            RecolorOutcome::Accepted(r) | RecolorOutcome::Exhausted(r) => r,
        }
    }
}

/// Recolors a background region with fresh neutral colors until the policy's
/// deviation between the recolored image and the recolored-plus-noise image drops
/// below `tau_background`.
pub fn recolor_until_insensitive(
    policy: &dyn PolicyBackend,
    obs: &Observation,
    region: &RegionMask,
    instruction: &str,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<RecolorOutcome> {
    if region.kind != RegionKind::Background {
        return Err(Error::InvalidConfig(format!(
            "recolor called on {} region `{}`",
            region.kind.as_str(),
            region.id()
        )));
    }
    let mut best: Option<Recolored> = None;
    for attempt in 0..cfg.recolor_max_attempts {
        let color = neutral_color(rng::derive(seed, "color", attempt as u64));
        let image = recolor_masked(&obs.image, region.mask(), color)?;
        let candidate = obs.with_image(image);
        let outcome = probe_region(
            policy,
            &candidate,
            instruction,
            region,
            cfg,
            rng::derive(seed, "verify", attempt as u64),
        )?;
        let rec = Recolored {
            image: candidate.image,
            color,
            attempts: attempt + 1,
            delta: outcome.delta,
        };
        if outcome.delta < cfg.tau_background {
            return Ok(RecolorOutcome::Accepted(rec));
        }
        if best.as_ref().is_none_or(|b| rec.delta < b.delta) {
            best = Some(rec);
        }
    }
    let mut best = best.expect("at least one attempt");
    best.attempts = cfg.recolor_max_attempts;
    Ok(RecolorOutcome::Exhausted(best))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAction {
    Inpaint,
    Recolor,
    /// Recolored with a color accepted earlier in the episode.
    RecolorCached,
    /// Recolor budget exhausted; best candidate applied.
    RecolorExhausted,
}

/// One line of the intervention audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub region: String,
    pub kind: RegionKind,
    pub action: EditAction,
    pub attempts: u32,
    pub delta_before: f64,
    pub delta_after: Option<f64>,
    pub color: Option<Rgb>,
    /// Pixels the edit was allowed to touch.
    pub edited: RleSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intervened {
    pub image: Image,
    pub records: Vec<InterventionRecord>,
}

impl Intervened {
    /// Union of every record's edit bounds.
    pub fn edited_mask(&self) -> Result<Mask> {
        let mut m = Mask::empty(self.image.width(), self.image.height());
        for r in &self.records {
            m = m.union(&r.edited.decode()?);
        }
        Ok(m)
    }

    pub fn audit_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Backend handles and cross-step state used by [`apply_interventions`].
pub struct EditContext<'a> {
    pub policy: &'a dyn PolicyBackend,
    pub inpainter: Option<&'a dyn InpaintBackend>,
    /// Accepted background colors by region id; reused instead of re-verifying.
    pub colors: Option<&'a mut BTreeMap<String, Rgb>>,
}

/// Applies edits for every sensitive entry of `report`, in report order, composing
/// on the running image. Insensitive regions are left untouched.
pub fn apply_interventions(
    ctx: &mut EditContext<'_>,
    obs: &Observation,
    report: &SensitivityReport,
    regions: &[RegionMask],
    instruction: &str,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Intervened> {
    let mut image = obs.image.clone();
    let mut records = Vec::new();
    for (i, entry) in report.entries.iter().enumerate() {
        if !entry.sensitive {
            continue;
        }
        let Some(region) = regions.iter().find(|r| r.id() == entry.region) else {
            warn!("sensitive region `{}` not grounded in this frame; skipping", entry.region);
            continue;
        };
        match region.kind {
            RegionKind::Object => {
                let (edited, dilated) = inpaint_object(&image, region, cfg, ctx.inpainter)?;
                image = edited;
                records.push(InterventionRecord {
                    region: entry.region.clone(),
                    kind: region.kind,
                    action: EditAction::Inpaint,
                    attempts: 1,
                    delta_before: entry.score,
                    delta_after: None,
                    color: None,
                    edited: dilated.to_rle(),
                });
            }
            RegionKind::Background => {
                let cached = ctx.colors.as_ref().and_then(|c| c.get(&entry.region).copied());
                let record = if let Some(color) = cached {
                    image = recolor_masked(&image, region.mask(), color)?;
                    InterventionRecord {
                        region: entry.region.clone(),
                        kind: region.kind,
                        action: EditAction::RecolorCached,
                        attempts: 0,
                        delta_before: entry.score,
                        delta_after: None,
                        color: Some(color),
                        edited: region.mask().to_rle(),
                    }
                } else {
                    let outcome = recolor_until_insensitive(
                        ctx.policy,
                        &obs.with_image(image.clone()),
                        region,
                        instruction,
                        cfg,
                        rng::derive(seed, "edit", i as u64),
                    )?;
                    let action = match outcome {
                        RecolorOutcome::Accepted(_) => EditAction::Recolor,
                        RecolorOutcome::Exhausted(ref r) => {
                            warn!(
                                "no neutral color made `{}` insensitive in {} attempts; using best (delta {:.5})",
                                entry.region, r.attempts, r.delta
                            );
                            EditAction::RecolorExhausted
                        }
                    };
                    let r = outcome.result().clone();
                    if let Some(colors) = ctx.colors.as_deref_mut() {
                        colors.insert(entry.region.clone(), r.color);
                    }
                    image = r.image;
                    InterventionRecord {
                        region: entry.region.clone(),
                        kind: region.kind,
                        action,
                        attempts: r.attempts,
                        delta_before: entry.score,
                        delta_after: Some(r.delta),
                        color: Some(r.color),
                        edited: region.mask().to_rle(),
                    }
                };
                records.push(record);
            }
        }
    }
    Ok(Intervened { image, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_surround_fills_with_that_color() {
        let img = Image::filled(20, 20, [90, 120, 30]);
        let mut painted = img.clone();
        for y in 5..12 {
            for x in 6..14 {
                painted.set(x, y, [255, 0, 0]);
            }
        }
        let mask = Mask::rect(20, 20, 6, 5, 14, 12);
        assert_eq!(onion_peel_fill(&painted, &mask).unwrap(), img);
    }

    #[test]
    fn empty_mask_is_identity() {
        let img = Image::filled(8, 8, [1, 2, 3]);
        assert_eq!(onion_peel_fill(&img, &Mask::empty(8, 8)).unwrap(), img);
    }

    #[test]
    fn neutral_colors_are_neutral_and_replayable() {
        for seed in 0..1000 {
            let c = neutral_color(seed);
            assert!(saturation(c) <= NEUTRAL_MAX_SATURATION, "{c:?}");
            let max = *c.iter().max().unwrap() as f64;
            let min = *c.iter().min().unwrap() as f64;
            assert!(max - min <= 0.2 * max);
        }
        assert_eq!(neutral_color(42), neutral_color(42));
    }

    #[test]
    fn hsv_conversion_matches_known_points() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }
}
