//! The per-chunk editing step and the episode loop around it.

pub mod episode;
pub mod summary;

use std::collections::BTreeMap;
use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::action::Observation;
use crate::attribution::gradcam_sensitive_regions;
use crate::backends::stub::StubServer;
use crate::backends::{AttnBackend, InpaintBackend, PolicyBackend, SegBackend, VlmBackend};
use crate::config::{PipelineConfig, ProbeSchedule};
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::intervene::{apply_interventions, EditContext, InterventionRecord};
use crate::mask::{Mask, RegionMask};
use crate::regions::{ground_regions, propose_regions, ParseMode, PromptTemplate, RegionProposal};
use crate::report::{Perturbation, ReportEntry, SensitivityReport};
use crate::rng;
use crate::sensitivity::probe_all;

pub use episode::{run_batch, run_episode, Environment, Episode, EpisodeLog, FrameRef, StepLog, EPISODE_SCHEMA};
pub use summary::{summarize, MethodSummary, Summary, SUMMARY_SCHEMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Observations go to the policy untouched.
    Raw,
    /// Propose, probe, and edit only the sensitive regions.
    Byovla,
    /// Edit every proposed region without probing.
    Nosens,
    /// Flag regions by attention attribution instead of probing.
    Gradcam,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Raw, Method::Byovla, Method::Nosens, Method::Gradcam];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Byovla => "byovla",
            Method::Nosens => "nosens",
            Method::Gradcam => "gradcam",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// Backend handles for one pipeline. Only the policy is mandatory.
#[derive(Clone)]
pub struct Backends {
    pub policy: Arc<dyn PolicyBackend>,
    pub vlm: Option<Arc<dyn VlmBackend>>,
    pub seg: Option<Arc<dyn SegBackend>>,
    pub inpaint: Option<Arc<dyn InpaintBackend>>,
    pub attn: Option<Arc<dyn AttnBackend>>,
}

impl Backends {
    /// Every role served by one object, e.g. a stub server or a protocol client.
    pub fn uniform<T>(all: Arc<T>) -> Self
    where
        T: PolicyBackend + VlmBackend + SegBackend + InpaintBackend + AttnBackend + 'static,
    {
        Backends {
            policy: all.clone(),
            vlm: Some(all.clone()),
            seg: Some(all.clone()),
            inpaint: Some(all.clone()),
            attn: Some(all),
        }
    }

    /// In-process handles of a stub server.
    pub fn from_stub(server: &StubServer) -> Result<Self> {
        Ok(Backends {
            policy: server
                .policy
                .clone()
                .ok_or_else(|| Error::FixtureMissing("stub server has no policy".into()))?,
            vlm: server.vlm.clone(),
            seg: server.seg.clone(),
            inpaint: server.inpaint.clone(),
            attn: server.attn.clone(),
        })
    }

    pub fn policy_only(policy: Arc<dyn PolicyBackend>) -> Self {
        Backends {
            policy,
            vlm: None,
            seg: None,
            inpaint: None,
            attn: None,
        }
    }

    /// Fails early when `method` needs a backend that is not configured.
    pub fn check(&self, method: Method) -> Result<()> {
        let missing = |role: &str| {
            Err(Error::BackendUnavailable {
                context: format!("method {}", method.as_str()),
                reason: format!("no {role} backend configured"),
            })
        };
        if method == Method::Raw {
            return Ok(());
        }
        if self.vlm.is_none() {
            return missing("vlm");
        }
        if self.seg.is_none() {
            return missing("segmenter");
        }
        if method == Method::Gradcam && self.attn.is_none() {
            return missing("attention");
        }
        Ok(())
    }
}

/// State carried between chunk steps of one episode.
#[derive(Clone, Debug, Default)]
pub struct StepCache {
    pub proposal: Option<RegionProposal>,
    pub ungrounded: Vec<String>,
    pub report: Option<SensitivityReport>,
    pub colors: BTreeMap<String, Rgb>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub edited: Image,
    pub report: SensitivityReport,
    pub regions: Vec<RegionMask>,
    pub interventions: Vec<InterventionRecord>,
}

/// Every region marked sensitive without measurement.
fn assumed_report(regions: &[RegionMask], cfg: &PipelineConfig, probed_at: usize) -> SensitivityReport {
    let entries = regions
        .iter()
        .map(|r| ReportEntry {
            region: r.id(),
            label: r.label.clone(),
            kind: r.kind,
            score: 0.0,
            threshold: cfg.tau(r.kind),
            sensitive: true,
            perturbation: Perturbation::Assumed,
            samples: 0,
            chunk_len: cfg.chunk_len(),
        })
        .collect();
    SensitivityReport::new(probed_at, entries)
}

/// One application of the editing pipeline to the observation at chunk step `n`.
///
/// The proposal is requested once (first call) and cached; regions are grounded
/// on every call. Probing (or attribution) runs at `n == 0`, or on every call
/// under [`ProbeSchedule::EveryChunk`]; otherwise the cached report is reused.
pub fn byovla_step(
    backends: &Backends,
    obs: &Observation,
    instruction: &str,
    cache: &mut StepCache,
    cfg: &PipelineConfig,
    method: Method,
    n: usize,
    seed: u64,
    exclusion: Option<&Mask>,
) -> Result<StepOutput> {
    let passthrough = |report| StepOutput {
        edited: obs.image.clone(),
        report,
        regions: Vec::new(),
        interventions: Vec::new(),
    };
    if method == Method::Raw {
        return Ok(passthrough(SensitivityReport::new(n, Vec::new())));
    }
    backends.check(method)?;
    let vlm = backends.vlm.as_deref().expect("checked");
    let seg = backends.seg.as_deref().expect("checked");

    if cache.proposal.is_none() {
        let template = PromptTemplate::default_template();
        cache.proposal = Some(propose_regions(vlm, &obs.image, instruction, &template, ParseMode::Lenient)?);
    }
    let proposal = cache.proposal.as_ref().expect("set above");
    let grounding = ground_regions(seg, &obs.image, proposal, cfg.box_threshold, cfg.text_threshold, exclusion)?;
    for l in grounding.ungrounded {
        if !cache.ungrounded.contains(&l) {
            cache.ungrounded.push(l);
        }
    }
    let regions = grounding.regions;
    if regions.is_empty() {
        return Ok(passthrough(SensitivityReport::new(n, Vec::new())));
    }

    let fresh = cache.report.is_none() || cfg.probe_schedule == ProbeSchedule::EveryChunk;
    let report = match method {
        Method::Nosens => assumed_report(&regions, cfg, n),
        Method::Byovla if fresh => {
            let r = probe_all(
                &*backends.policy,
                obs,
                instruction,
                &regions,
                cfg,
                rng::derive(seed, "probe", n as u64),
                n,
            )?;
            cache.report = Some(r.clone());
            r
        }
        Method::Gradcam if fresh => {
            let attn = backends.attn.as_deref().expect("checked");
            let t = attn.attention(&obs.image, instruction, cfg.gradcam.layer)?;
            let r = gradcam_sensitive_regions(&t, &regions, obs.image.dims(), &cfg.gradcam, n)?;
            cache.report = Some(r.clone());
            r
        }
        _ => cache.report.clone().expect("fresh covers the empty cache"),
    };
    debug!("step {n}: {} of {} regions sensitive", report.sensitive().count(), report.entries.len());

    let colors = match cfg.probe_schedule {
        ProbeSchedule::InitOnly => Some(&mut cache.colors),
        ProbeSchedule::EveryChunk => None,
    };
    let mut ctx = EditContext {
        policy: &*backends.policy,
        inpainter: backends.inpaint.as_deref(),
        colors,
    };
    let out = apply_interventions(&mut ctx, obs, &report, &regions, instruction, cfg, rng::derive(seed, "edit", n as u64))?;
    Ok(StepOutput {
        edited: out.image,
        report,
        regions,
        interventions: out.records,
    })
}
