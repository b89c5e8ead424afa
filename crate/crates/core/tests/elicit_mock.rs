//! End-to-end elicitation tests against a scripted loopback endpoint.

use tolcal_core::dataset::{save_dataset, ConfidenceScale, DatasetFormat};
use tolcal_core::elicit::{
    elicit_dataset, response_json, ConstructPrompt, ElicitConfig, ElicitInput, ElicitMode,
};
use tolcal_core::error::Error;
use tolcal_core::testutil::{MockChatServer, MockReply};

fn construct() -> ConstructPrompt {
    ConstructPrompt::new("formality", "How formal the text is.", 10.0).unwrap()
}

fn inputs(n: usize) -> Vec<ElicitInput> {
    (0..n)
        .map(|i| ElicitInput {
            id: format!("text-{i:02}"),
            text: format!("sample text {i}"),
            y_true: (i as f64 * 7.0) % 100.0,
        })
        .collect()
}

fn config(url: String, key_var: &str) -> ElicitConfig {
    let mut cfg = ElicitConfig::new(url, key_var, "mock-model");
    cfg.backoff_ms = 1;
    cfg
}

#[test]
fn verbal_round_trip_fills_a_dataset() {
    std::env::set_var("TOLCAL_MOCK_KEY_RT", "test-key");
    let server = MockChatServer::start(
        vec![],
        MockReply::Content(response_json("formality", 73, Some(80))),
    );
    let cfg = config(server.url(), "TOLCAL_MOCK_KEY_RT");
    let outcome = elicit_dataset(&inputs(5), &construct(), &cfg, ElicitMode::Verbal).unwrap();

    assert_eq!(outcome.dataset.len(), 5);
    assert!(outcome.failures.is_empty());
    assert_eq!(outcome.total_retries, 0);
    for (record, input) in outcome.dataset.iter().zip(inputs(5)) {
        assert_eq!(record.id, input.id);
        assert_eq!(record.y_true, input.y_true);
        assert_eq!(record.y_pred, 73.0);
        assert_eq!(record.confidence, 0.8);
    }
    assert_eq!(server.hits(), 5);
    // The prompt itself went over the wire.
    let first_request = &server.requests()[0];
    assert!(first_request.contains("BEGIN RATING SCALE"));
    assert!(first_request.contains("accuracy_estimate"));
    assert!(first_request.contains("\"model\":\"mock-model\""));
}

#[test]
fn transient_failures_are_retried_with_backoff() {
    std::env::set_var("TOLCAL_MOCK_KEY_RETRY", "test-key");
    let server = MockChatServer::start(
        vec![MockReply::Status(500), MockReply::Status(429)],
        MockReply::Content(response_json("formality", 40, Some(60))),
    );
    let cfg = config(server.url(), "TOLCAL_MOCK_KEY_RETRY");
    let outcome = elicit_dataset(&inputs(1), &construct(), &cfg, ElicitMode::Verbal).unwrap();

    assert_eq!(outcome.dataset.len(), 1);
    assert_eq!(outcome.dataset.records()[0].y_pred, 40.0);
    assert_eq!(outcome.total_retries, 2);
    assert_eq!(server.hits(), 3);
}

#[test]
fn exhausted_retries_become_per_id_failures() {
    std::env::set_var("TOLCAL_MOCK_KEY_EXHAUST", "test-key");
    let server = MockChatServer::start(vec![], MockReply::Status(503));
    let mut cfg = config(server.url(), "TOLCAL_MOCK_KEY_EXHAUST");
    cfg.retries = 2;
    cfg.concurrency = 1;
    let outcome = elicit_dataset(&inputs(2), &construct(), &cfg, ElicitMode::Verbal).unwrap();

    assert_eq!(outcome.dataset.len(), 0);
    assert_eq!(outcome.failures.len(), 2);
    assert_eq!(outcome.failures[0].id, "text-00");
    assert!(outcome.failures[0].error.contains("503"));
    // record count + failure count == input count
    assert_eq!(outcome.dataset.len() + outcome.failures.len(), 2);
    // 2 inputs × (1 attempt + 2 retries)
    assert_eq!(server.hits(), 6);
}

#[test]
fn auth_rejection_aborts_the_batch() {
    std::env::set_var("TOLCAL_MOCK_KEY_AUTH", "test-key");
    let server = MockChatServer::start(vec![], MockReply::Status(401));
    let cfg = config(server.url(), "TOLCAL_MOCK_KEY_AUTH");
    let err = elicit_dataset(&inputs(8), &construct(), &cfg, ElicitMode::Verbal).unwrap_err();

    assert!(matches!(err, Error::Auth(_)), "{err}");
    // Abort means nowhere near 8 × (1 + retries) requests.
    assert!(server.hits() < 8, "served {} requests", server.hits());
    // The message names the variable, not the key value.
    let message = err.to_string();
    assert!(message.contains("TOLCAL_MOCK_KEY_AUTH"));
    assert!(!message.contains("test-key"));
}

#[test]
fn resampling_mode_stores_all_samples() {
    std::env::set_var("TOLCAL_MOCK_KEY_RESAMPLE", "test-key");
    let server = MockChatServer::start(
        vec![],
        MockReply::Content(response_json("formality", 55, None)),
    );
    let mut cfg = config(server.url(), "TOLCAL_MOCK_KEY_RESAMPLE");
    cfg.resamples = 20;
    let outcome = elicit_dataset(&inputs(3), &construct(), &cfg, ElicitMode::Resampling).unwrap();

    assert_eq!(outcome.dataset.len(), 3);
    for record in outcome.dataset.iter() {
        let samples = record.samples.as_ref().expect("samples attached");
        assert_eq!(samples.len(), 20);
        assert!(samples.iter().all(|&s| s == 55.0));
        // All 20 draws agree, so the window covers everything.
        assert_eq!(record.confidence, 1.0);
        assert_eq!(record.y_pred, 55.0);
    }
    // Rating-only prompts: no confidence construct on the wire.
    assert!(server.requests().iter().all(|r| !r.contains("accuracy_estimate")));
    assert_eq!(server.hits(), 60);
}

#[test]
fn results_keep_input_order_under_concurrency() {
    std::env::set_var("TOLCAL_MOCK_KEY_ORDER", "test-key");
    let server = MockChatServer::start(
        vec![],
        MockReply::Content(response_json("formality", 50, Some(50))),
    );
    let mut cfg = config(server.url(), "TOLCAL_MOCK_KEY_ORDER");
    cfg.concurrency = 4;
    let batch = inputs(16);
    let outcome = elicit_dataset(&batch, &construct(), &cfg, ElicitMode::Verbal).unwrap();

    let got: Vec<&str> = outcome.dataset.iter().map(|r| r.id.as_str()).collect();
    let want: Vec<&str> = batch.iter().map(|i| i.id.as_str()).collect();
    assert_eq!(got, want);
}

#[test]
fn api_key_travels_in_the_header_and_nowhere_else() {
    std::env::set_var("TOLCAL_MOCK_KEY_LEAK", "sk-verysecret-123");
    let server = MockChatServer::start(
        vec![],
        MockReply::Content(response_json("formality", 60, Some(70))),
    );
    let cfg = config(server.url(), "TOLCAL_MOCK_KEY_LEAK");
    let outcome = elicit_dataset(&inputs(2), &construct(), &cfg, ElicitMode::Verbal).unwrap();

    // The key authenticates the request...
    assert!(server
        .requests()
        .iter()
        .all(|r| r.contains("authorization: Bearer sk-verysecret-123")
            || r.contains("Authorization: Bearer sk-verysecret-123")));
    // ...but never reaches any serialized output.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.jsonl");
    save_dataset(&outcome.dataset, &path, DatasetFormat::Jsonl, ConfidenceScale::Unit).unwrap();
    let written = std::fs::read_to_string(&path).unwrap();
    assert!(!written.contains("sk-verysecret-123"));
    let debug = format!("{:?} {:?}", cfg, outcome);
    assert!(!debug.contains("sk-verysecret-123"));
}
