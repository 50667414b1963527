use std::collections::BTreeMap;
use std::sync::Arc;

use negosim_core::agents::stub::{completion_body, StubRule, StubServer};
use negosim_core::agents::{Agent, AgentSpec, RemoteSpec, ScriptedPolicy};
use negosim_core::scenario::bundled;
use negosim_core::{run_negotiation, ActionMessage, AgentError, OutcomeKind, RunOptions, Treatment, TreatmentConfig};
use serde_json::json;

fn spec(base_url: &str, key_env: &str, attempts: u32) -> RemoteSpec {
    std::env::set_var(key_env, "sk-test");
    serde_json::from_value(json!({
        "base_url": base_url,
        "model": "stub-model",
        "api_key_env": key_env,
        "reasoning": {"reasoning_effort": "low"},
        "retry": {"max_attempts": attempts, "initial_backoff_ms": 1, "max_backoff_ms": 5},
        "timeout_secs": 10
    }))
    .unwrap()
}

fn rule(status: u16, body: serde_json::Value, times: Option<usize>) -> StubRule {
    StubRule { model: None, last_message_contains: None, status, body, times }
}

fn pair(remote: RemoteSpec) -> BTreeMap<String, Box<dyn Agent>> {
    let mut a: BTreeMap<String, Box<dyn Agent>> = BTreeMap::new();
    a.insert("hr".into(), AgentSpec::Remote(remote).build(None).unwrap());
    a.insert(
        "candidate".into(),
        AgentSpec::Scripted(ScriptedPolicy::ThresholdAccepter { threshold: 0, words: 4 }).build(None).unwrap(),
    );
    a
}

#[test]
fn retries_then_parses_stubbed_reply() {
    let s = bundled::new_recruit();
    let offer = ActionMessage::propose("Here is our offer.", s.best_bundle("candidate")).to_json();
    let server = StubServer::start(vec![
        rule(429, json!({"error": "slow down"}), Some(1)),
        rule(503, json!({"error": "busy"}), Some(1)),
        rule(200, completion_body(&offer, Some(42)), None),
    ])
    .unwrap();
    let mut agents = pair(spec(&server.base_url(), "NEGOSIM_STUB_KEY_A", 4));
    let cfg = TreatmentConfig::timed(Treatment::TimeAware, 300);
    let t = run_negotiation(Arc::new(s.clone()), &mut agents, &cfg, "hr", 3, &RunOptions::default()).unwrap();

    assert_eq!(t.outcome.kind, OutcomeKind::Deal);
    assert_eq!(t.events.len(), 2);
    assert_eq!(t.events[0].raw, offer);
    assert_eq!(t.events[0].reasoning_tokens, Some(42));
    assert_eq!(t.events[1].reasoning_tokens, None);
    assert_eq!(t.outcome.agreed.as_ref().unwrap(), &s.best_bundle("candidate"));

    let reqs = server.requests();
    assert_eq!(reqs.len(), 3);
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer sk-test"));
    let body = &reqs[2].body;
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["reasoning_effort"], "low");
    let msgs = body["messages"].as_array().unwrap();
    assert_eq!(msgs[0]["role"], "system");
    assert!(msgs[0]["content"].as_str().unwrap().contains("You have exactly 300 seconds"));
    assert!(!serde_json::to_string(&t.to_jsonl()).unwrap().contains("sk-test"));
}

#[test]
fn exhausted_retries_end_the_run_with_an_error() {
    let s = bundled::new_recruit();
    let server = StubServer::start(vec![rule(429, json!({"error": "slow down"}), None)]).unwrap();
    let mut agents = pair(spec(&server.base_url(), "NEGOSIM_STUB_KEY_B", 2));
    let cfg = TreatmentConfig::timed(Treatment::Control, 240);
    let t = run_negotiation(Arc::new(s), &mut agents, &cfg, "hr", 0, &RunOptions::default()).unwrap();
    assert_eq!(t.outcome.kind, OutcomeKind::Timeout);
    assert!(t.events.is_empty());
    assert!(t.outcome.error.as_deref().unwrap().contains("2 attempts"), "{:?}", t.outcome.error);
    assert_eq!(server.requests().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(vec![rule(400, json!({"error": "bad request"}), None)]).unwrap();
    let spec = spec(&server.base_url(), "NEGOSIM_STUB_KEY_C", 5);
    let s = bundled::new_recruit();
    let mut agents = pair(spec);
    let cfg = TreatmentConfig::timed(Treatment::Control, 240);
    let t = run_negotiation(Arc::new(s), &mut agents, &cfg, "hr", 0, &RunOptions::default()).unwrap();
    assert!(t.outcome.error.as_deref().unwrap().contains("400"));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn fixture_file_rules_match_on_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.json");
    let rules = vec![
        StubRule {
            model: Some("other".into()),
            last_message_contains: None,
            status: 200,
            body: completion_body("wrong", None),
            times: None,
        },
        rule(200, completion_body(r#"{"message": "hi", "proposal": null, "accepted": false, "taking_batna": true}"#, None), None),
    ];
    std::fs::write(&path, serde_json::to_string(&rules).unwrap()).unwrap();
    let server = StubServer::from_fixture_file(&path).unwrap();
    let s = bundled::new_recruit();
    let mut agents = pair(spec(&server.base_url(), "NEGOSIM_STUB_KEY_D", 1));
    let cfg = TreatmentConfig::timed(Treatment::Control, 240);
    let t = run_negotiation(Arc::new(s), &mut agents, &cfg, "hr", 0, &RunOptions::default()).unwrap();
    assert_eq!(t.outcome.kind, OutcomeKind::Batna);
    assert_eq!(t.events[0].action.message, "hi");
}

#[test]
fn missing_key_is_reported() {
    let spec: RemoteSpec = serde_json::from_value(json!({
        "base_url": "http://127.0.0.1:9/v1",
        "model": "m",
        "api_key_env": "NEGOSIM_STUB_KEY_UNSET"
    }))
    .unwrap();
    match AgentSpec::Remote(spec).build(None) {
        Err(AgentError::MissingApiKey(name)) => assert_eq!(name, "NEGOSIM_STUB_KEY_UNSET"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected an error"),
    }
}
