//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::action::Observation;
use crate::backends::remote::{BackendClient, EndpointOptions};
use crate::backends::transport::{InProcess, Replay, Subprocess, Transcript, Transport};
use crate::calibrate::{calibrate_threshold, load_dataset, save_dataset};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::RegionKind;
use crate::orchestrator::summary::load_logs;
use crate::orchestrator::{byovla_step, run_batch, summarize, Backends, Method, StepCache};
use crate::rng;
use crate::testbed::calibration::{marker_dataset, MarkerPolicy};
use crate::testbed::{generate, stub_server, SceneSpec, TestbedEnv};

pub const RUN_SCHEMA: &str = "run/1";

#[derive(Parser, Debug)]
#[command(name = "vlashield", version, about = "Distractor suppression for black-box VLA policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Third-quartile threshold over an annotated dataset.
    Calibrate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: RegionKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Backend spec; see `run --help`.
        #[arg(long, default_value = "marker")]
        backends: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiplies the calibrated threshold for deployment.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Proposes, grounds and probes the regions of one image.
    Probe {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        backends: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Runs seeded testbed episodes with one method.
    Run {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene JSON.
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// `stub:SCENE`, `stdio:SCENE`, `http:URL`, `replay:TRANSCRIPT` or `marker`.
        /// Defaults to `stub:` on the `--env` scene.
        #[arg(long)]
        backends: Option<String>,
        /// Records every backend exchange (forces one worker).
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Success rates per method over run directories.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// `.json` or `.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serves the stub backends for a scene on stdin/stdout.
    ServeStub {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 3)]
        horizon: usize,
    },
    /// Regenerates the scene and calibration fixtures.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<RegionKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Resolved backends plus the protocol client, when there is one.
pub struct Resolved {
    pub backends: Backends,
    pub client: Option<Arc<BackendClient>>,
}

fn client(transport: Box<dyn Transport>) -> Result<Resolved> {
    let c = Arc::new(BackendClient::new(transport, EndpointOptions::default())?);
    Ok(Resolved {
        backends: Backends::uniform(c.clone()),
        client: Some(c),
    })
}

/// Builds backends from a spec string. `record` routes in-process stubs
/// through the wire protocol so their exchanges can be saved.
pub fn resolve_backends(spec: &str, horizon: usize, record: bool) -> Result<Resolved> {
    let (scheme, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match scheme {
        "marker" => Ok(Resolved {
            backends: Backends::policy_only(Arc::new(MarkerPolicy { horizon })),
            client: None,
        }),
        "stub" => {
            let server = stub_server(&SceneSpec::load(arg)?, horizon)?;
            if record {
                client(Box::new(InProcess::new(Arc::new(server))))
            } else {
                Ok(Resolved {
                    backends: Backends::from_stub(&server)?,
                    client: None,
                })
            }
        }
        "stdio" => {
            let exe = std::env::current_exe()?;
            let h = horizon.to_string();
            client(Box::new(Subprocess::spawn(exe, &["serve-stub", "--scene", arg, "--horizon", &h])?))
        }
        #[cfg(feature = "http")]
        "http" | "https" => client(Box::new(crate::backends::transport::Http::new(spec))),
        "replay" => client(Box::new(Replay::new(Transcript::load(arg)?))),
        other => Err(Error::InvalidConfig(format!("unknown backend scheme `{other}`"))),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn save_transcript(r: &Resolved, path: Option<&Path>) -> Result<()> {
    if let (Some(path), Some(c)) = (path, &r.client) {
        c.transcript().save(path)?;
    }
    Ok(())
}

/// Written next to the episode directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub method: Method,
    pub episodes: usize,
    pub seed: u64,
    pub scene: String,
    pub config_hash: String,
    pub config: PipelineConfig,
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Calibrate {
            dataset,
            kind,
            out,
            config,
            backends,
            seed,
            scale,
        } => {
            let cfg = load_config(config.as_deref())?;
            let envs = load_dataset(&dataset)?;
            let r = resolve_backends(&backends, cfg.horizon, false)?;
            let mut report = calibrate_threshold(&*r.backends.policy, &envs, &cfg, kind, seed)?;
            if let Some(s) = scale {
                report = report.with_scale(s)?;
            }
            info!("tau = {} over {} samples", report.tau, report.samples.len());
            std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
        }
        Command::Probe {
            image,
            instruction,
            config,
            backends,
            out,
            seed,
            transcript,
        } => {
            let cfg = load_config(config.as_deref())?;
            let r = resolve_backends(&backends, cfg.horizon, transcript.is_some())?;
            let obs = Observation::new(Image::load_png(&image)?);
            let mut cache = StepCache::default();
            let step = byovla_step(&r.backends, &obs, &instruction, &mut cache, &cfg, Method::Byovla, 0, seed, None);
            save_transcript(&r, transcript.as_deref())?;
            std::fs::write(out, step?.report.to_json())?;
        }
        Command::Run {
            method,
            episodes,
            seed,
            env,
            out,
            config,
            backends,
            transcript,
            workers,
        } => {
            let cfg = load_config(config.as_deref())?;
            let scene = SceneSpec::load(&env)?;
            std::fs::create_dir_all(&out)?;
            let manifest = RunManifest {
                schema: RUN_SCHEMA.into(),
                method,
                episodes,
                seed,
                scene: scene.name.clone(),
                config_hash: cfg.hash(),
                config: cfg.clone(),
            };
            std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
            if episodes == 0 {
                warn!("--episodes 0: nothing to run");
                return Ok(());
            }
            let spec = backends.unwrap_or_else(|| format!("stub:{}", env.display()));
            let r = resolve_backends(&spec, cfg.horizon, transcript.is_some())?;
            r.backends.check(method)?;
            let workers = if r.client.is_some() { 1 } else { workers };
            let seeds: Vec<u64> = (0..episodes as u64).map(|n| rng::derive(seed, "episode", n)).collect();
            let result = run_batch(|s| TestbedEnv::new(scene.clone(), s), &r.backends, &cfg, method, &seeds, workers);
            save_transcript(&r, transcript.as_deref())?;
            let eps = result?;
            for (n, ep) in eps.iter().enumerate() {
                ep.save(out.join(format!("ep_{n}")))?;
            }
            let s = summarize(eps.iter().map(|e| &e.log));
            if let Some(m) = s.methods.first() {
                info!("{}: {}/{} successful", m.method.as_str(), m.successes, m.trials);
            }
        }
        Command::Report { runs, out } => {
            let logs = load_logs(&runs)?;
            if logs.is_empty() {
                warn!("no episode logs under {}", runs.display());
            }
            let s = summarize(&logs);
            let text = match out.extension().and_then(|e| e.to_str()) {
                Some("json") => s.to_json(),
                Some("csv") => s.to_csv(),
                _ => return Err(Error::InvalidConfig(format!("{}: output must end in .json or .csv", out.display()))),
            };
            std::fs::write(out, text)?;
        }
        Command::ServeStub { scene, horizon } => {
            let server = stub_server(&SceneSpec::load(scene)?, horizon)?;
            let stdin = std::io::stdin();
            server.serve(stdin.lock(), std::io::stdout().lock())?;
        }
        Command::GenFixtures { out } => gen_fixtures(&out)?,
    }
    Ok(())
}

/// Deviations of the calibration fixture, meters.
pub const CALIBRATION_DELTAS: [f64; 8] = [0.001, 0.002, 0.003, 0.004, 0.006, 0.008, 0.010, 0.012];
pub const PROBE_SCENES: u64 = 20;

/// Writes `scenes/standard.json`, `scenes/probe_NN.json`, the standard scene's
/// initial frame, and the `calibration/` marker dataset under `out`.
pub fn gen_fixtures(out: &Path) -> Result<()> {
    let cfg = PipelineConfig::default();
    let scenes = out.join("scenes");
    std::fs::create_dir_all(&scenes)?;
    let standard = generate::standard_scene(&cfg)?;
    std::fs::write(scenes.join("standard.json"), standard.to_json())?;
    standard.render_initial().save_png(out.join("standard_initial.png"))?;
    for i in 0..PROBE_SCENES {
        std::fs::write(scenes.join(format!("probe_{i:02}.json")), generate::probe_scene(i, &cfg)?.to_json())?;
    }
    save_dataset(out.join("calibration"), &marker_dataset(&CALIBRATION_DELTAS, RegionKind::Object)?)?;
    Ok(())
}

/// Runs the CLI; on failure prints `{"error": {"code", "message"}}` to stderr.
pub fn main_from_args() -> i32 {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let body = serde_json::json!({ "error": { "code": e.code(), "message": e.to_string() } });
            let _ = writeln!(std::io::stderr(), "{body}");
            1
        }
    }
}
