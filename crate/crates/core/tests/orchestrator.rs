mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use vlashield::backends::stub::StubVlm;
use vlashield::backends::{CountingPolicy, PolicyBackend, VlmBackend};
use vlashield::config::{PipelineConfig, ProbeSchedule};
use vlashield::error::{Error, Result};
use vlashield::image::Image;
use vlashield::intervene::EditAction;
use vlashield::orchestrator::{byovla_step, run_episode, Backends, Episode, EpisodeLog, Method, StepCache};
use vlashield::regions::PromptTemplate;
use vlashield::rng;
use vlashield::testbed::{stub_server, SimPolicy, TestbedEnv};

struct CountingVlm {
    inner: Arc<dyn VlmBackend>,
    calls: AtomicUsize,
}

impl VlmBackend for CountingVlm {
    fn propose(&self, image: &Image, instruction: &str, template: &PromptTemplate) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.propose(image, instruction, template)
    }
}

struct Counted {
    backends: Backends,
    policy: Arc<CountingPolicy<Arc<dyn PolicyBackend>>>,
    vlm: Arc<CountingVlm>,
}

fn counted(scene: &vlashield::testbed::SceneSpec, cfg: &PipelineConfig) -> Counted {
    let base = stub_backends(scene, cfg.horizon);
    let policy = Arc::new(CountingPolicy::new(base.policy.clone()));
    let vlm = Arc::new(CountingVlm {
        inner: base.vlm.clone().unwrap(),
        calls: AtomicUsize::new(0),
    });
    let backends = Backends {
        policy: policy.clone(),
        vlm: Some(vlm.clone()),
        ..base
    };
    Counted { backends, policy, vlm }
}

fn initial(scene: &vlashield::testbed::SceneSpec, seed: u64) -> TestbedEnv {
    TestbedEnv::new(scene.clone(), seed).unwrap()
}

#[test]
fn raw_never_calls_the_vlm() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let c = counted(&scene, &cfg);
    let mut env = initial(&scene, 3);
    let ep = run_episode(&mut env, &c.backends, &cfg, Method::Raw, 3);
    assert_eq!(c.vlm.calls.load(Ordering::SeqCst), 0);
    assert_eq!(c.policy.calls(), ep.log.steps.len());
    assert!(ep.log.steps.iter().all(|s| s.raw.sha256 == s.edited.sha256));
}

#[test]
fn first_step_policy_calls_follow_region_and_recolor_counts() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let c = counted(&scene, &cfg);
    let env = initial(&scene, 4);
    let mut cache = StepCache::default();
    let out = byovla_step(&c.backends, &env.observe(), INSTRUCTION, &mut cache, &cfg, Method::Byovla, 0, 11, Some(&env.exclusion())).unwrap();
    let attempts: usize = out
        .interventions
        .iter()
        .filter(|r| matches!(r.action, EditAction::Recolor | EditAction::RecolorExhausted))
        .map(|r| r.attempts as usize)
        .sum();
    assert!(attempts >= 1, "the standard scene has a sensitive background");
    assert_eq!(c.policy.chunks(), cfg.k * (out.regions.len() + 1) + attempts * 2 * cfg.k);
    assert_eq!(c.vlm.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn init_only_reuses_the_report_and_colors() {
    let cfg = PipelineConfig::default();
    assert_eq!(cfg.probe_schedule, ProbeSchedule::InitOnly);
    let scene = standard_scene();
    let c = counted(&scene, &cfg);
    let env = initial(&scene, 5);
    let mut cache = StepCache::default();
    let first = byovla_step(&c.backends, &env.observe(), INSTRUCTION, &mut cache, &cfg, Method::Byovla, 0, 1, Some(&env.exclusion())).unwrap();
    c.policy.reset();
    let later = byovla_step(&c.backends, &env.observe(), INSTRUCTION, &mut cache, &cfg, Method::Byovla, 1, 1, Some(&env.exclusion())).unwrap();
    assert_eq!(c.policy.calls(), 0);
    assert_eq!(c.vlm.calls.load(Ordering::SeqCst), 1);
    assert_eq!(later.report, first.report);
    assert_eq!(later.edited, first.edited);
    assert!(later
        .interventions
        .iter()
        .all(|r| matches!(r.action, EditAction::Inpaint | EditAction::RecolorCached)));
}

#[test]
fn every_chunk_probes_again() {
    let cfg = PipelineConfig {
        probe_schedule: ProbeSchedule::EveryChunk,
        ..Default::default()
    };
    let scene = standard_scene();
    let c = counted(&scene, &cfg);
    let env = initial(&scene, 5);
    let mut cache = StepCache::default();
    byovla_step(&c.backends, &env.observe(), INSTRUCTION, &mut cache, &cfg, Method::Byovla, 0, 1, Some(&env.exclusion())).unwrap();
    c.policy.reset();
    let later = byovla_step(&c.backends, &env.observe(), INSTRUCTION, &mut cache, &cfg, Method::Byovla, 1, 1, Some(&env.exclusion())).unwrap();
    assert!(c.policy.chunks() >= cfg.k * (later.regions.len() + 1));
    assert_eq!(later.report.probed_at, 1);
    assert_eq!(c.vlm.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn empty_proposal_leaves_the_frame_bit_exact() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let base = stub_backends(&scene, cfg.horizon);
    let backends = Backends {
        vlm: Some(Arc::new(StubVlm::always(r#"{"not_relevant_objects": [], "not_relevant_backgrounds": []}"#))),
        ..base
    };
    let env = initial(&scene, 6);
    let obs = env.observe();
    let mut cache = StepCache::default();
    let out = byovla_step(&backends, &obs, INSTRUCTION, &mut cache, &cfg, Method::Byovla, 0, 0, None).unwrap();
    assert_eq!(out.edited, obs.image);
    assert!(out.report.entries.is_empty());
    assert!(out.interventions.is_empty());
}

#[test]
fn phantom_labels_are_recorded_as_ungrounded() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let mut env = initial(&scene, 7);
    let ep = run_episode(&mut env, &stub_backends(&scene, cfg.horizon), &cfg, Method::Byovla, 7);
    for l in &scene.phantom_labels {
        assert!(ep.log.ungrounded.contains(l), "{l} missing from {:?}", ep.log.ungrounded);
    }
}

#[test]
fn nosens_edits_every_grounded_region() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let b = stub_backends(&scene, cfg.horizon);
    let seeds = episode_seeds(31, 2);
    let by = run_method(&scene, &b, &cfg, Method::Byovla, &seeds).unwrap();
    let ns = run_method(&scene, &b, &cfg, Method::Nosens, &seeds).unwrap();
    for (a, n) in by.iter().zip(&ns) {
        let first = &n.log.steps[0];
        assert_eq!(first.interventions.len(), first.regions.len());
        assert!(a.log.steps[0].interventions.len() < first.interventions.len());
    }
}

/// The edit may leave a bias on the policy's mean action, but no larger than the
/// standard error band of a K-sample estimate.
#[test]
fn edited_observation_restores_the_nominal_action() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let sim = SimPolicy::new(scene.clone(), cfg.horizon).unwrap();
    let bound = 2.0 * scene.policy.action_noise / (cfg.k as f64).sqrt();
    let b = stub_backends(&scene, cfg.horizon);
    for seed in 0..8 {
        let env = initial(&scene, seed);
        let mut cache = StepCache::default();
        let out = byovla_step(&b, &env.observe(), INSTRUCTION, &mut cache, &cfg, Method::Byovla, 0, seed, Some(&env.exclusion())).unwrap();
        let raw = sim.offset(&env.render());
        let bias = sim.offset(&out.edited);
        for i in 0..3 {
            assert!(bias[i].abs() <= bound, "seed {seed} axis {i}: bias {} > {bound} (raw {})", bias[i], raw[i]);
        }
    }
}

#[test]
fn raw_distracted_action_is_far_from_nominal() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let nominal = SimPolicy::new(scene.nominal(), cfg.horizon).unwrap();
    let distracted = SimPolicy::new(scene.clone(), cfg.horizon).unwrap();
    let env = initial(&scene, 0);
    assert_eq!(nominal.offset(&env.render()), [0.0; 3]);
    let shift = distracted.offset(&env.render());
    let gap = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(gap > 10.0 * scene.policy.action_noise, "offset {shift:?}");
}

#[test]
fn episodes_are_reproducible_and_round_trip() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let seed = 1234;
    let run = || {
        let mut env = initial(&scene, rng::derive(seed, "env", 0));
        run_episode(&mut env, &stub_backends(&scene, cfg.horizon), &cfg, Method::Byovla, seed)
    };
    let (a, b): (Episode, Episode) = (run(), run());
    assert_eq!(a.log.to_json(), b.log.to_json());
    assert_eq!(a.frames, b.frames);
    let back = EpisodeLog::from_json(&a.log.to_json()).unwrap();
    assert_eq!(back, a.log);

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let on_disk = std::fs::read_to_string(dir.path().join("log.json")).unwrap();
    assert_eq!(EpisodeLog::from_json(&on_disk).unwrap(), a.log);
    let step = &a.log.steps[0];
    let png = Image::load_png(dir.path().join(&step.edited.path)).unwrap();
    assert_eq!(&png, a.frame(&step.edited.path).unwrap());
}

#[test]
fn different_seeds_differ() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let eps = run_method(&scene, &stub_backends(&scene, cfg.horizon), &cfg, Method::Byovla, &episode_seeds(5, 2)).unwrap();
    assert_ne!(eps[0].log.trajectory, eps[1].log.trajectory);
}

#[test]
fn log_rejects_wrong_schema_and_gaps() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let mut env = initial(&scene, 1);
    let ep = run_episode(&mut env, &stub_backends(&scene, cfg.horizon), &cfg, Method::Raw, 1);
    let mut v: serde_json::Value = serde_json::from_str(&ep.log.to_json()).unwrap();
    v["schema"] = "episode/0".into();
    assert!(EpisodeLog::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&ep.log.to_json()).unwrap();
    v["steps"].as_array_mut().unwrap().remove(1);
    assert!(EpisodeLog::from_json(&v.to_string()).is_err());
}

#[test]
fn missing_backends_fail_before_running() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let server = stub_server(&scene, cfg.horizon).unwrap();
    let policy_only = Backends::policy_only(server.policy.clone().unwrap());
    assert!(policy_only.check(Method::Raw).is_ok());
    for m in [Method::Byovla, Method::Nosens, Method::Gradcam] {
        assert!(matches!(policy_only.check(m), Err(Error::BackendUnavailable { .. })));
    }
    let no_attn = Backends {
        attn: None,
        ..Backends::from_stub(&server).unwrap()
    };
    assert!(no_attn.check(Method::Byovla).is_ok());
    assert!(no_attn.check(Method::Gradcam).is_err());
}

#[test]
fn backend_failure_aborts_the_episode() {
    struct Broken;
    impl PolicyBackend for Broken {
        fn predict(&self, _: &vlashield::action::Observation, _: &str, _: usize, _: u64) -> Result<Vec<vlashield::action::ActionChunk>> {
            Err(Error::BackendUnavailable {
                context: "test".into(),
                reason: "down".into(),
            })
        }
    }
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let mut env = initial(&scene, 1);
    let ep = run_episode(&mut env, &Backends::policy_only(Arc::new(Broken)), &cfg, Method::Raw, 1);
    assert!(!ep.log.success);
    assert_eq!(ep.log.failure_mode.as_deref(), Some("aborted"));
    assert!(ep.log.aborted.as_deref().unwrap().starts_with("backend_unavailable"));
}

#[test]
fn init_only_episode_call_count_is_closed_form() {
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let c = counted(&scene, &cfg);
    let mut env = initial(&scene, 8);
    let ep = run_episode(&mut env, &c.backends, &cfg, Method::Byovla, 8);
    let first = &ep.log.steps[0];
    let recolor: usize = first
        .interventions
        .iter()
        .filter(|r| matches!(r.action, EditAction::Recolor | EditAction::RecolorExhausted))
        .map(|r| r.attempts as usize)
        .sum();
    let probe = cfg.k * (first.regions.len() + 1) + recolor * 2 * cfg.k;
    assert_eq!(c.policy.chunks(), probe + ep.log.steps.len());
    assert_eq!(c.policy.calls(), first.regions.len() + 1 + recolor * 2 + ep.log.steps.len());
}

#[test]
fn raw_transcript_holds_only_predictions() {
    use vlashield::backends::remote::{BackendClient, EndpointOptions};
    use vlashield::backends::transport::InProcess;
    let cfg = PipelineConfig::default();
    let scene = standard_scene();
    let client = Arc::new(
        BackendClient::new(Box::new(InProcess::new(Arc::new(stub_server(&scene, cfg.horizon).unwrap()))), EndpointOptions::default()).unwrap(),
    );
    let mut env = initial(&scene, 2);
    let ep = run_episode(&mut env, &Backends::uniform(client.clone()), &cfg, Method::Raw, 2);
    let t = client.transcript();
    assert_eq!(t.count_type("predict_req"), ep.log.steps.len());
    assert_eq!(t.exchanges.len(), ep.log.steps.len());
}
