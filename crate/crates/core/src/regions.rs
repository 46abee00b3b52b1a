//! Task-irrelevant region proposals (from a VLM) and their pixel grounding (from a
//! text-prompted segmenter).

use std::collections::BTreeMap;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backends::{SegBackend, VlmBackend};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{Mask, RegionKind, RegionMask};

pub const MAX_LABEL_WORDS: usize = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub not_relevant_objects: Vec<String>,
    pub not_relevant_backgrounds: Vec<String>,
}

impl RegionProposal {
    pub fn is_empty(&self) -> bool {
        self.not_relevant_objects.is_empty() && self.not_relevant_backgrounds.is_empty()
    }

    /// Labels in prompt order with their kind; a label listed twice keeps its first kind.
    pub fn labelled(&self) -> Vec<(String, RegionKind)> {
        let mut out: Vec<(String, RegionKind)> = Vec::new();
        let all = self
            .not_relevant_objects
            .iter()
            .map(|l| (l, RegionKind::Object))
            .chain(self.not_relevant_backgrounds.iter().map(|l| (l, RegionKind::Background)));
        for (label, kind) in all {
            if !out.iter().any(|(l, _)| l == label) {
                out.push((label.clone(), kind));
            }
        }
        out
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for l in self.not_relevant_objects.iter().chain(&self.not_relevant_backgrounds) {
            let words = l.split_whitespace().count();
            if words == 0 {
                return Err("empty label".into());
            }
            if words > MAX_LABEL_WORDS {
                return Err(format!("label `{l}` has more than {MAX_LABEL_WORDS} words"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    /// Only a JSON object with both list keys.
    Strict,
    /// JSON, or two bracketed lists in prose (optionally introduced by the key names).
    #[default]
    Lenient,
}

fn parse_json_object(raw: &str) -> Option<RegionProposal> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str(&raw[start..=end]).ok()
}

/// Parses `[a, 'b', "c"]` starting at byte offset `open` (which must be `[`).
fn parse_bracket_list(raw: &str, open: usize) -> Option<(Vec<String>, usize)> {
    let close = open + raw[open..].find(']')?;
    let inner = raw[open + 1..close].trim();
    let items = if inner.is_empty() {
        Vec::new()
    } else {
        inner
            .split(',')
            .map(|s| s.trim().trim_matches(|c| c == '"' || c == '\'').trim().to_string())
            .collect()
    };
    Some((items, close + 1))
}

fn parse_prose(raw: &str) -> Option<RegionProposal> {
    let keyed = |key: &str| -> Option<Vec<String>> {
        let at = raw.find(key)?;
        let open = at + raw[at..].find('[')?;
        parse_bracket_list(raw, open).map(|(v, _)| v)
    };
    if let (Some(o), Some(b)) = (keyed("not_relevant_objects"), keyed("not_relevant_backgrounds")) {
        return Some(RegionProposal {
            not_relevant_objects: o,
            not_relevant_backgrounds: b,
        });
    }
    let first = raw.find('[')?;
    let (objects, next) = parse_bracket_list(raw, first)?;
    let second = next + raw[next..].find('[')?;
    let (backgrounds, _) = parse_bracket_list(raw, second)?;
    Some(RegionProposal {
        not_relevant_objects: objects,
        not_relevant_backgrounds: backgrounds,
    })
}

pub fn parse_proposal(raw: &str, mode: ParseMode) -> Result<RegionProposal> {
    let parsed = match mode {
        ParseMode::Strict => parse_json_object(raw),
        ParseMode::Lenient => parse_json_object(raw).or_else(|| parse_prose(raw)),
    };
    let proposal = parsed.ok_or_else(|| Error::ProposalParse { raw: raw.to_string() })?;
    proposal.validate().map_err(|why| {
        warn!("rejecting proposal: {why}");
        Error::ProposalParse { raw: raw.to_string() }
    })?;
    Ok(proposal)
}

/// One few-shot demonstration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub image_ref: String,
    pub task: String,
    pub objects: Vec<String>,
    pub backgrounds: Vec<String>,
}

/// Few-shot proposal prompt.
///
/// Text form (one directive per line, free text between directives):
///
/// ```text
/// #template <id> v<version>
/// #preamble
/// ...
/// #exemplar image=<ref> task=<task text>
/// ["obj", ...]
/// ["background", ...]
/// #query
/// ... {TASK} ... {IMAGE_k} ...
/// ```
///
/// `{TASK}` is replaced by the instruction; `{IMAGE_k}` marks where image `k` is
/// attached (exemplars are `1..=n`, the live observation is `0`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub version: u32,
    pub preamble: String,
    pub exemplars: Vec<Exemplar>,
    pub query: String,
}

pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/irrelevant_regions.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    /// Image reference per `{IMAGE_k}` slot, in order of appearance.
    pub images: Vec<String>,
}

impl PromptTemplate {
    pub fn default_template() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("bundled template parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidConfig(format!("prompt template: {m}"));
        let mut lines = text.lines().peekable();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut parts = header
            .strip_prefix("#template ")
            .ok_or_else(|| bad("missing #template header"))?
            .split_whitespace();
        let id = parts.next().ok_or_else(|| bad("missing id"))?.to_string();
        let version = parts
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing v<version>"))?;

        let mut preamble = String::new();
        let mut query = String::new();
        let mut exemplars = Vec::new();
        enum Section {
            None,
            Preamble,
            Exemplar,
            Query,
        }
        let mut section = Section::None;
        let mut pending_lists: Vec<Vec<String>> = Vec::new();
        let mut current: Option<(String, String)> = None;
        let mut flush = |current: &mut Option<(String, String)>, lists: &mut Vec<Vec<String>>| -> Result<()> {
            if let Some((image_ref, task)) = current.take() {
                if lists.len() != 2 {
                    return Err(bad("exemplar needs exactly two lists"));
                }
                let backgrounds = lists.pop().unwrap();
                let objects = lists.pop().unwrap();
                exemplars.push(Exemplar {
                    image_ref,
                    task,
                    objects,
                    backgrounds,
                });
            }
            lists.clear();
            Ok(())
        };
        for line in lines {
            if let Some(rest) = line.strip_prefix('#') {
                flush(&mut current, &mut pending_lists)?;
                if rest == "preamble" {
                    section = Section::Preamble;
                } else if rest == "query" {
                    section = Section::Query;
                } else if let Some(args) = rest.strip_prefix("exemplar ") {
                    let image = args
                        .strip_prefix("image=")
                        .and_then(|a| a.split_once(" task="))
                        .ok_or_else(|| bad("exemplar needs image=<ref> task=<text>"))?;
                    current = Some((image.0.to_string(), image.1.to_string()));
                    section = Section::Exemplar;
                } else {
                    return Err(bad(&format!("unknown directive #{rest}")));
                }
                continue;
            }
            match section {
                Section::Preamble => {
                    preamble.push_str(line);
                    preamble.push('\n');
                }
                Section::Query => {
                    query.push_str(line);
                    query.push('\n');
                }
                Section::Exemplar => {
                    let t = line.trim();
                    if t.starts_with('[') {
                        let (items, _) = parse_bracket_list(t, 0).ok_or_else(|| bad("unterminated list"))?;
                        pending_lists.push(items);
                    } else if !t.is_empty() {
                        return Err(bad("exemplar body must be two bracketed lists"));
                    }
                }
                Section::None if line.trim().is_empty() => {}
                Section::None => return Err(bad("text before first section")),
            }
        }
        flush(&mut current, &mut pending_lists)?;
        if exemplars.is_empty() {
            return Err(bad("few-shot template needs at least one exemplar"));
        }
        Ok(PromptTemplate {
            id,
            version,
            preamble: preamble.trim_end().to_string(),
            exemplars,
            query: query.trim_end().to_string(),
        })
    }

    pub fn render(&self, task: &str) -> RenderedPrompt {
        let quote = |v: &[String]| {
            let items: Vec<String> = v.iter().map(|s| format!("\"{s}\"")).collect();
            format!("[{}]", items.join(", "))
        };
        let mut text = self.preamble.clone();
        let mut images = Vec::new();
        for (i, ex) in self.exemplars.iter().enumerate() {
            text.push_str(&format!(
                "\n\nExample {}. Task: '{}'\n\n{}\n{}\n\n{{IMAGE_{}}}",
                i + 1,
                ex.task,
                quote(&ex.objects),
                quote(&ex.backgrounds),
                i + 1
            ));
            images.push(ex.image_ref.clone());
        }
        text.push_str("\n\n");
        text.push_str(&self.query.replace("{TASK}", task));
        if self.query.contains("{IMAGE_0}") {
            images.push("observation".to_string());
        }
        RenderedPrompt { text, images }
    }
}

/// Queries the VLM once and parses its answer.
pub fn propose_regions(
    vlm: &dyn VlmBackend,
    image: &Image,
    instruction: &str,
    template: &PromptTemplate,
    mode: ParseMode,
) -> Result<RegionProposal> {
    let raw = vlm.propose(image, instruction, template)?;
    info!("vlm raw answer: {raw:?}");
    let proposal = parse_proposal(&raw, mode)?;
    info!(
        "proposal: {}",
        serde_json::to_string(&proposal).expect("proposal serializes")
    );
    Ok(proposal)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grounding {
    pub regions: Vec<RegionMask>,
    /// Proposed labels the segmenter did not find (above threshold).
    pub ungrounded: Vec<String>,
}

/// Turns proposal labels into pixel masks. Hits below threshold are dropped; labels
/// with no surviving mask are reported as ungrounded, never as an error. If
/// `exclusion` is given (e.g. the task object's pixels), masks are clipped to avoid it.
pub fn ground_regions(
    seg: &dyn SegBackend,
    image: &Image,
    proposal: &RegionProposal,
    box_threshold: f64,
    text_threshold: f64,
    exclusion: Option<&Mask>,
) -> Result<Grounding> {
    let labelled = proposal.labelled();
    if labelled.is_empty() {
        return Ok(Grounding::default());
    }
    let labels: Vec<String> = labelled.iter().map(|(l, _)| l.clone()).collect();
    let hits = seg.segment(image, &labels, box_threshold, text_threshold)?;
    let cutoff = box_threshold.max(text_threshold);

    let mut by_label: BTreeMap<&str, Vec<(Mask, f64)>> = BTreeMap::new();
    for hit in hits {
        if hit.mask.dims() != image.dims() {
            return Err(Error::protocol(
                format!(
                    "segment mask for `{}` is {}x{}, image is {}x{}",
                    hit.label,
                    hit.mask.width(),
                    hit.mask.height(),
                    image.width(),
                    image.height()
                ),
                "",
            ));
        }
        let Some((label, _)) = labelled.iter().find(|(l, _)| *l == hit.label) else {
            warn!("segmenter returned unrequested label `{}`", hit.label);
            continue;
        };
        if hit.score < cutoff {
            continue;
        }
        let mut mask = hit.mask;
        if let Some(ex) = exclusion {
            let overlap = mask.intersection_count(ex);
            if overlap > 0 {
                warn!("mask for `{label}` overlaps the task-object exclusion by {overlap} px; clipping");
                mask = mask.subtract(ex);
            }
        }
        if mask.is_empty() {
            continue;
        }
        by_label.entry(label.as_str()).or_default().push((mask, hit.score));
    }

    let mut regions = Vec::new();
    let mut ungrounded = Vec::new();
    for (label, kind) in &labelled {
        match by_label.remove(label.as_str()) {
            Some(masks) => {
                for (i, (m, score)) in masks.into_iter().enumerate() {
                    regions.push(RegionMask::new(label.clone(), *kind, i as u32, score, m)?);
                }
            }
            None => ungrounded.push(label.clone()),
        }
    }
    Ok(Grounding {
        regions,
        ungrounded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_bracketed_prose() {
        let raw = "Sure!\n['orange', 'blue mat', 'spatula', 'donut', 'cup']\n[\"wall\", \"counter\"]";
        let p = parse_proposal(raw, ParseMode::Lenient).unwrap();
        assert_eq!(p.not_relevant_objects, ["orange", "blue mat", "spatula", "donut", "cup"]);
        assert_eq!(p.not_relevant_backgrounds, ["wall", "counter"]);
    }

    #[test]
    fn parses_keyed_prose_and_json() {
        let raw = "not_relevant_objects: [cup]\nnot_relevant_backgrounds: [wall]";
        let p = parse_proposal(raw, ParseMode::Lenient).unwrap();
        assert_eq!(p.not_relevant_objects, ["cup"]);
        let j = r#"```json
{"not_relevant_objects": ["cup"], "not_relevant_backgrounds": []}
```"#;
        let p = parse_proposal(j, ParseMode::Strict).unwrap();
        assert_eq!(p.not_relevant_objects, ["cup"]);
        assert!(p.not_relevant_backgrounds.is_empty());
    }

    #[test]
    fn strict_mode_rejects_prose() {
        assert!(matches!(
            parse_proposal("[cup]\n[wall]", ParseMode::Strict),
            Err(Error::ProposalParse { .. })
        ));
    }

    #[test]
    fn empty_lists_are_valid() {
        let p = parse_proposal("[]\n[]", ParseMode::Lenient).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn prose_without_lists_fails_with_raw_attached() {
        let raw = "I think the orange and the cup are irrelevant.";
        match parse_proposal(raw, ParseMode::Lenient) {
            Err(Error::ProposalParse { raw: r }) => assert_eq!(r, raw),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn overlong_labels_rejected() {
        assert!(parse_proposal("[a very long object label here]\n[]", ParseMode::Lenient).is_err());
    }

    #[test]
    fn default_template_renders_both_list_names() {
        let t = PromptTemplate::default_template();
        assert!(!t.exemplars.is_empty());
        let r = t.render("place the carrot on yellow plate");
        assert!(r.text.contains("'not_relevant_objects'"));
        assert!(r.text.contains("'not_relevant_backgrounds'"));
        assert!(r.text.contains("place the carrot on yellow plate"));
        assert!(!r.text.contains("{TASK}"));
        assert_eq!(r.images.len(), t.exemplars.len() + 1);
    }
}
