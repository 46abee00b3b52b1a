//! Episode loop and its log.

use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{byovla_step, Backends, Method, StepCache};
use crate::action::{Action, Observation, RobotState};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::intervene::InterventionRecord;
use crate::mask::{Mask, RegionKind, RleSpec};
use crate::perturb::warm_filter;
use crate::regions::RegionProposal;
use crate::report::SensitivityReport;
use crate::rng;
use crate::testbed::{Outcome, TestbedEnv, TickRecord};

pub const EPISODE_SCHEMA: &str = "episode/1";

/// What the episode loop needs from a world.
pub trait Environment {
    fn instruction(&self) -> String;
    fn observe(&self) -> Observation;
    fn step(&mut self, action: &Action) -> Result<()>;
    fn done(&self) -> bool;
    /// Control ticks executed so far.
    fn tick(&self) -> usize;
    fn outcome(&self) -> Outcome;
    /// Pixels region masks must never cover (task object, goal).
    fn exclusion(&self) -> Option<Mask> {
        None
    }
    fn trajectory(&self) -> Vec<TickRecord> {
        Vec::new()
    }
    fn scene_name(&self) -> Option<String> {
        None
    }
}

impl Environment for TestbedEnv {
    fn instruction(&self) -> String {
        self.scene().instruction.clone()
    }
    fn observe(&self) -> Observation {
        TestbedEnv::observe(self)
    }
    fn step(&mut self, action: &Action) -> Result<()> {
        TestbedEnv::step(self, action);
        Ok(())
    }
    fn done(&self) -> bool {
        TestbedEnv::done(self)
    }
    fn tick(&self) -> usize {
        TestbedEnv::tick(self)
    }
    fn outcome(&self) -> Outcome {
        TestbedEnv::outcome(self)
    }
    fn exclusion(&self) -> Option<Mask> {
        Some(TestbedEnv::exclusion(self))
    }
    fn trajectory(&self) -> Vec<TickRecord> {
        TestbedEnv::trajectory(self).to_vec()
    }
    fn scene_name(&self) -> Option<String> {
        Some(self.scene().name.clone())
    }
}

/// A frame written next to the log, with the SHA-256 of its raw RGB bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub path: String,
    pub sha256: String,
}

fn digest(image: &Image) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.data());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundedRegion {
    pub id: String,
    pub kind: RegionKind,
    pub mask: RleSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Chunk index, contiguous from 0.
    pub step: usize,
    /// Control tick at which the chunk was requested.
    pub tick: usize,
    pub raw: FrameRef,
    pub edited: FrameRef,
    pub regions: Vec<GroundedRegion>,
    pub report: SensitivityReport,
    pub chunk: Vec<Action>,
    pub interventions: Vec<InterventionRecord>,
    pub state: Option<RobotState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub schema: String,
    pub instruction: String,
    pub method: Method,
    pub config_hash: String,
    pub seed: u64,
    pub scene: Option<String>,
    pub success: bool,
    pub failure_mode: Option<String>,
    pub proposal: Option<RegionProposal>,
    pub ungrounded: Vec<String>,
    pub steps: Vec<StepLog>,
    pub trajectory: Vec<TickRecord>,
    /// Reason the episode stopped early, if it did.
    pub aborted: Option<String>,
}

impl EpisodeLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let log: EpisodeLog = serde_json::from_str(s)?;
        if log.schema != EPISODE_SCHEMA {
            return Err(Error::protocol(format!("unsupported episode schema `{}`", log.schema), ""));
        }
        if log.steps.iter().enumerate().any(|(i, s)| s.step != i) {
            return Err(Error::protocol("episode steps are not contiguous from 0", ""));
        }
        Ok(log)
    }
}

/// A finished episode: the log plus the frames it references.
#[derive(Clone, Debug)]
pub struct Episode {
    pub log: EpisodeLog,
    pub frames: Vec<(String, Image)>,
}

impl Episode {
    /// Writes `log.json` and `frames/*.png` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("frames"))?;
        for (path, img) in &self.frames {
            img.save_png(dir.join(path))?;
        }
        std::fs::write(dir.join("log.json"), self.log.to_json())?;
        Ok(())
    }

    pub fn frame(&self, path: &str) -> Option<&Image> {
        self.frames.iter().find(|(p, _)| p == path).map(|(_, i)| i)
    }
}

/// Runs one episode. Each chunk step observes, edits according to `method`,
/// requests one chunk on the edited frame, and executes it open-loop.
///
/// Backend and environment errors end the episode with `aborted` set rather
/// than discarding the partial log.
pub fn run_episode(
    env: &mut dyn Environment,
    backends: &Backends,
    cfg: &PipelineConfig,
    method: Method,
    seed: u64,
) -> Episode {
    let instruction = env.instruction();
    let mut cache = StepCache::default();
    let mut steps = Vec::new();
    let mut frames = Vec::new();
    let mut aborted = None;
    let mut n = 0usize;
    while !env.done() {
        match run_step(env, backends, cfg, method, seed, n, &instruction, &mut cache) {
            Ok((step, raw, edited)) => {
                frames.push((step.raw.path.clone(), raw));
                frames.push((step.edited.path.clone(), edited));
                steps.push(step);
            }
            Err(e) => {
                warn!("episode aborted at step {n}: {e}");
                aborted = Some(format!("{}: {e}", e.code()));
                break;
            }
        }
        n += 1;
    }
    let outcome = env.outcome();
    let failure_mode = match (&aborted, outcome.failure_mode) {
        (Some(_), _) => Some("aborted".to_string()),
        (None, m) => m.map(|m| m.as_str().to_string()),
    };
    info!(
        "episode seed {seed} method {}: success={} after {} ticks",
        method.as_str(),
        outcome.success && aborted.is_none(),
        env.tick()
    );
    Episode {
        log: EpisodeLog {
            schema: EPISODE_SCHEMA.into(),
            instruction,
            method,
            config_hash: cfg.hash(),
            seed,
            scene: env.scene_name(),
            success: outcome.success && aborted.is_none(),
            failure_mode,
            proposal: cache.proposal,
            ungrounded: cache.ungrounded,
            steps,
            trajectory: env.trajectory(),
            aborted,
        },
        frames,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    env: &mut dyn Environment,
    backends: &Backends,
    cfg: &PipelineConfig,
    method: Method,
    seed: u64,
    n: usize,
    instruction: &str,
    cache: &mut StepCache,
) -> Result<(StepLog, Image, Image)> {
    let tick = env.tick();
    let mut obs = env.observe();
    if let Some(gains) = cfg.warm_filter {
        obs.image = warm_filter(&obs.image, gains)?;
    }
    let exclusion = env.exclusion();
    let out = byovla_step(backends, &obs, instruction, cache, cfg, method, n, seed, exclusion.as_ref())?;
    let mut chunks = backends.policy.predict(
        &obs.with_image(out.edited.clone()),
        instruction,
        1,
        rng::derive(seed, "act", n as u64),
    )?;
    if chunks.len() != 1 {
        return Err(Error::ChunkShape(format!("asked for 1 chunk, got {}", chunks.len())));
    }
    let chunk = chunks.remove(0);
    for a in chunk.steps() {
        if env.done() {
            break;
        }
        env.step(a)?;
    }
    let raw_path = format!("frames/{n:04}_raw.png");
    let edited_path = format!("frames/{n:04}_edited.png");
    let step = StepLog {
        step: n,
        tick,
        raw: FrameRef {
            path: raw_path,
            sha256: digest(&obs.image),
        },
        edited: FrameRef {
            path: edited_path,
            sha256: digest(&out.edited),
        },
        regions: out
            .regions
            .iter()
            .map(|r| GroundedRegion {
                id: r.id(),
                kind: r.kind,
                mask: r.mask().to_rle(),
            })
            .collect(),
        report: out.report,
        chunk: chunk.steps().to_vec(),
        interventions: out.interventions,
        state: obs.state,
    };
    Ok((step, obs.image, out.edited))
}

/// Runs `seeds.len()` episodes on up to `workers` threads; results keep seed order.
pub fn run_batch<E, F>(
    make_env: F,
    backends: &Backends,
    cfg: &PipelineConfig,
    method: Method,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<Episode>>
where
    E: Environment,
    F: Fn(u64) -> Result<E> + Sync,
{
    let run = |seed: u64| -> Result<Episode> {
        let mut env = make_env(rng::derive(seed, "env", 0))?;
        Ok(run_episode(&mut env, backends, cfg, method, seed))
    };
    let workers = workers.max(1);
    let mut out = Vec::with_capacity(seeds.len());
    for batch in seeds.chunks(workers) {
        let results: Vec<Result<Episode>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch.iter().map(|&seed| s.spawn(move || run(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("episode worker panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}
