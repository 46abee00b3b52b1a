mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use vlashield::backends::protocol::{Request, Response, PROTOCOL_VERSION};
use vlashield::backends::remote::{BackendClient, EndpointOptions};
use vlashield::backends::stub::StubServer;
use vlashield::backends::transport::{InProcess, LineHandler, Replay, Subprocess, Transcript, Transport};
use vlashield::backends::{PolicyBackend, SegBackend, VlmBackend};
use vlashield::error::Error;
use vlashield::regions::PromptTemplate;
use vlashield::testbed::{stub_server, TestbedEnv};

fn golden() -> Transcript {
    Transcript::load(fixtures().join("golden/probe_standard.jsonl")).unwrap()
}

/// Checklist an adapter's transcript has to satisfy.
#[test]
fn golden_transcript_conforms() {
    let t = golden();
    assert!(!t.exchanges.is_empty());
    for (n, e) in t.exchanges.iter().enumerate() {
        let req = Request::from_line(&e.request).unwrap();
        assert_eq!(req.v, PROTOCOL_VERSION);
        assert_eq!(req.id, n as u64 + 1, "ids count up from 1");
        assert!(!e.request.contains('\n') && !e.response.contains('\n'));
        let resp = Response::parse_for(&e.response, &req).unwrap();
        assert_eq!(resp.id, req.id);
    }
    assert_eq!(t.count_type("propose_req"), 1);
    assert!(t.count_type("segment_req") >= 1);
    assert!(t.count_type("predict_req") >= 2);
    let back = Transcript::from_jsonl(&t.to_jsonl()).unwrap();
    assert_eq!(back, t);
}

#[test]
fn stub_server_answers_bad_lines_with_error_resp() {
    let server = stub_server(&standard_scene(), 3).unwrap();
    for line in ["", "{", "[]", r#"{"v":"1","id":3,"type":"dance_req"}"#, r#"{"v":"9","id":4,"type":"propose_req"}"#] {
        let resp: serde_json::Value = serde_json::from_str(&server.handle_line(line)).unwrap();
        assert_eq!(resp["type"], "error_resp", "{line}");
        assert_eq!(resp["v"], PROTOCOL_VERSION);
    }
}

#[test]
fn missing_backend_maps_to_fixture_missing() {
    let client = BackendClient::new(Box::new(InProcess::new(Arc::new(StubServer::default()))), EndpointOptions::default()).unwrap();
    let img = standard_scene().render_initial();
    let err = client.propose(&img, INSTRUCTION, &PromptTemplate::default_template()).unwrap_err();
    assert!(matches!(err, Error::FixtureMissing(_)), "{err:?}");
    // The failed call does not poison the client.
    let err = client.segment(&img, &["cup".into()], 0.4, 0.4).unwrap_err();
    assert!(matches!(err, Error::FixtureMissing(_)));
}

#[test]
fn wire_backends_match_in_process_ones() {
    let scene = standard_scene();
    let server = Arc::new(stub_server(&scene, 3).unwrap());
    let client = BackendClient::new(Box::new(InProcess::new(server.clone())), EndpointOptions::default()).unwrap();
    let obs = TestbedEnv::new(scene.clone(), 2).unwrap().observe();
    let direct = server.policy.as_ref().unwrap().predict(&obs, INSTRUCTION, 5, 17).unwrap();
    assert_eq!(client.predict(&obs, INSTRUCTION, 5, 17).unwrap(), direct);
    let labels: Vec<String> = scene.distractors.iter().map(|d| d.label.clone()).collect();
    let direct = server.seg.as_ref().unwrap().segment(&obs.image, &labels, 0.4, 0.4).unwrap();
    assert_eq!(client.segment(&obs.image, &labels, 0.4, 0.4).unwrap(), direct);
}

#[test]
fn subprocess_server_speaks_the_protocol() {
    let scene_path = fixtures().join("scenes/standard.json");
    let child = Subprocess::spawn(env!("CARGO_BIN_EXE_vlashield"), &["serve-stub", "--scene", scene_path.to_str().unwrap()]).unwrap();
    let client = BackendClient::new(Box::new(child), EndpointOptions::default()).unwrap();
    let scene = standard_scene();
    let obs = TestbedEnv::new(scene.clone(), 2).unwrap().observe();
    let direct = stub_server(&scene, 3).unwrap().policy.unwrap().predict(&obs, INSTRUCTION, 3, 8).unwrap();
    assert_eq!(client.predict(&obs, INSTRUCTION, 3, 8).unwrap(), direct);
    let proposal = client.propose(&obs.image, INSTRUCTION, &PromptTemplate::default_template()).unwrap();
    assert!(proposal.contains("not_relevant_objects"));
    assert_eq!(client.transcript().exchanges.len(), 2);
}

#[test]
fn dead_subprocess_is_backend_unavailable() {
    let child = Subprocess::spawn(env!("CARGO_BIN_EXE_vlashield"), &["serve-stub", "--scene", "/nonexistent.json"]).unwrap();
    let client = BackendClient::new(
        Box::new(child),
        EndpointOptions {
            timeout: Duration::from_secs(5),
            retries: 0,
        },
    )
    .unwrap();
    let img = standard_scene().render_initial();
    let err = client.propose(&img, INSTRUCTION, &PromptTemplate::default_template()).unwrap_err();
    assert!(matches!(err, Error::BackendUnavailable { .. }), "{err:?}");
}

#[test]
fn replay_rejects_diverging_requests() {
    let replay = Replay::new(golden());
    let first = golden().exchanges[0].clone();
    assert_eq!(replay.roundtrip(&first.request, Duration::from_secs(1)).unwrap(), first.response);
    let err = replay.roundtrip(&first.request, Duration::from_secs(1)).unwrap_err();
    assert!(matches!(err, Error::Protocol { .. }), "{err:?}");
}
