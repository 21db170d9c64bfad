mod common;

use std::time::Duration;

use common::{MockServer, Transcript};
use mathforge::domain::{read_jsonl, write_jsonl, Question, Source};
use mathforge::mqr::*;

fn golden(name: &str) -> String {
    std::fs::read_to_string(format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn http_client(server: &MockServer) -> ReformulatorClient {
    let config = ClientConfig {
        endpoint: server.url.clone(),
        model: "mock-reformulator".into(),
        timeout_secs: 10.0,
        backoff_base_ms: 1,
        api_key_env: "MATHFORGE_TEST_UNSET_KEY".into(),
        ..ClientConfig::default()
    };
    ReformulatorClient::from_config(&config).unwrap()
}

fn dataset(n: usize) -> Vec<Question> {
    (0..n)
        .map(|i| {
            Question::new(
                format!("q{i}"),
                format!("What is {i} + 3 mod 10?"),
                ((i + 3) % 10).to_string(),
                (i % 2) as u32,
                Source::Original,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn prompts_match_golden_files() {
    let q = golden("question.txt");
    assert_eq!(
        render_prompt(&q, Aspect::Background).unwrap(),
        golden("prompt_background.txt")
    );
    assert_eq!(render_prompt(&q, Aspect::Term).unwrap(), golden("prompt_term.txt"));
    assert_eq!(
        render_prompt(&q, Aspect::Subproblem).unwrap(),
        golden("prompt_subproblem.txt")
    );
    assert_eq!(
        render_audit_prompt(&q, "REWRITTEN").unwrap(),
        golden("audit_prompt.txt")
    );
}

#[test]
fn augment_over_http_quadruples_dataset() {
    let server = MockServer::start(Transcript::load("mqr_transcript.json"), 0);
    let client = http_client(&server);
    let ds = dataset(10);
    let out = augment(&ds, &client, &AugmentConfig::default()).unwrap();
    assert_eq!(out.merged.len(), 40);
    assert_eq!(server.count(), 60);
    for q in &out.merged {
        let orig = ds
            .iter()
            .find(|o| q.id == o.id || q.id.starts_with(&format!("{}#", o.id)))
            .unwrap();
        assert_eq!(q.gold_answer, orig.gold_answer);
        assert_eq!(q.stratum, orig.stratum);
    }
    // Fences stripped, text otherwise verbatim.
    let bg = out.merged.iter().find(|q| q.id == "q4#background").unwrap();
    assert_eq!(
        bg.text,
        "During the harvest festival in an old mountain village, the miller keeps his accounts on a slate. What is 4 + 3 mod 10?"
    );
    assert_eq!(bg.source, Source::Background);
    assert!(out.summary.per_aspect.values().all(|s| s.equivalence_rate() == 1.0));

    // Request wire format.
    let bodies = server.bodies.lock().unwrap();
    let b = &bodies[0];
    assert_eq!(b["model"], "mock-reformulator");
    assert_eq!(b["messages"][0]["role"], "user");
    assert_eq!(b["temperature"], 1.0);

    // Round trip through the dataset format.
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &out.merged).unwrap();
    assert_eq!(read_jsonl(&buf[..]).unwrap(), out.merged);
}

#[test]
fn rejected_term_variants_are_dropped() {
    let server = MockServer::start(Transcript::load("mqr_transcript_reject_term.json"), 0);
    let out = augment(&dataset(10), &http_client(&server), &AugmentConfig::default()).unwrap();
    assert_eq!(out.merged.len(), 30);
    assert_eq!(out.summary.per_aspect[&Aspect::Term].acceptance_rate(), 0.0);
    assert_eq!(out.summary.per_aspect[&Aspect::Background].acceptance_rate(), 1.0);
    let term_rows: Vec<_> = out.audit_rows.iter().filter(|r| r.aspect == Aspect::Term).collect();
    assert_eq!(term_rows.len(), 10);
    assert!(term_rows.iter().all(|r| r.verdict == Verdict::No));
}

#[test]
fn http_retries_after_server_errors() {
    let server = MockServer::start(Transcript::load("mqr_transcript.json"), 2);
    let client = http_client(&server).with_retries(3, Duration::from_millis(1));
    let r = reformulate(&client, &dataset(1)[0], Aspect::Term).unwrap();
    assert_eq!(r.attempts, 3);
    assert!(r.text.starts_with("Call a number *slate-balanced*"));

    let server = MockServer::start(Transcript::load("mqr_transcript.json"), 10);
    let client = http_client(&server).with_retries(1, Duration::from_millis(1));
    let err = reformulate(&client, &dataset(1)[0], Aspect::Term).unwrap_err();
    assert!(matches!(err, MqrError::Transport { attempts: 2, .. }), "{err}");
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let config = ClientConfig {
        endpoint: format!("http://{addr}/v1"),
        model: "m".into(),
        timeout_secs: 2.0,
        max_retries: 1,
        backoff_base_ms: 1,
        ..ClientConfig::default()
    };
    let client = ReformulatorClient::from_config(&config).unwrap();
    let err = client.send("hello").unwrap_err();
    assert!(err.is_retryable(), "{err}");
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    let server = MockServer::start(Transcript::load("mqr_transcript.json"), 0);
    std::env::set_var("MATHFORGE_TEST_KEY_FOR_HEADER", "sk-test-123");
    let config = ClientConfig {
        endpoint: server.url.clone(),
        model: "m".into(),
        api_key_env: "MATHFORGE_TEST_KEY_FOR_HEADER".into(),
        ..ClientConfig::default()
    };
    let client = ReformulatorClient::from_config(&config).unwrap();
    client.send("ping").unwrap();
    assert_eq!(
        server.auth_headers.lock().unwrap()[0].as_deref(),
        Some("Bearer sk-test-123")
    );
    assert!(!format!("{client:?}").contains("sk-test-123"));
}

#[test]
fn warm_cache_skips_the_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AugmentConfig {
        cache_path: Some(dir.path().join("mqr-cache.json")),
        ..AugmentConfig::default()
    };
    let server = MockServer::start(Transcript::load("mqr_transcript.json"), 0);
    let client = http_client(&server);
    let first = augment(&dataset(6), &client, &cfg).unwrap();
    let calls = server.count();
    let second = augment(&dataset(6), &client, &cfg).unwrap();
    assert_eq!(server.count(), calls);
    assert_eq!(second.summary.client_calls, 0);
    assert_eq!(first.merged, second.merged);
    assert!(!dir
        .path()
        .read_dir()
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with(".tmp")));
}
