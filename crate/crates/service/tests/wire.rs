mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use common::{mock, read, script};
use fsb_core::backend::{BackendError, GenerationRequest, LanguageModel, TokenCounter, UniformBackend};
use fsb_core::bot::{Conversation, StepOptions};
use fsb_service::remote::HttpBackend;
use fsb_service::{spawn_local, wire};
use serde_json::json;

fn remote(lm: Arc<dyn LanguageModel>) -> HttpBackend {
    let addr = spawn_local(wire::router(lm)).unwrap();
    HttpBackend::connect_with(&format!("http://{addr}"), 3, Duration::from_millis(5)).unwrap()
}

#[test]
fn remote_calls_match_in_process() {
    let local = mock();
    let r = remote(local.clone());
    assert_eq!(r.descriptor(), local.descriptor());
    for (ctx, cont) in [("Dialogue:\nUser: hi", " there you"), ("", "Dialogue:"), ("a b", " c\nd")] {
        assert_eq!(r.score(ctx, cont).unwrap(), local.score(ctx, cont).unwrap());
        assert_eq!(r.count_tokens(ctx).unwrap(), local.count_tokens(ctx).unwrap());
        let req = GenerationRequest::new(ctx).with_max_tokens(7);
        assert_eq!(r.generate(&req).unwrap(), local.generate(&req).unwrap());
    }
}

#[test]
fn bot_over_the_wire_reproduces_golden_transcript() {
    let lm: Arc<dyn LanguageModel> = Arc::new(remote(mock()));
    let bot = common::bot(lm);
    let mut conv = Conversation::new("e2e");
    for m in &script().messages {
        bot.step(&mut conv, m, &StepOptions::default()).unwrap();
    }
    assert_eq!(conv.transcript_jsonl(), read("transcript.jsonl"));
}

#[test]
fn overflow_is_typed_and_not_retried() {
    let hits = Arc::new(AtomicUsize::new(0));
    let inner: Arc<dyn LanguageModel> = Arc::new(UniformBackend::new(50).with_window(10));
    let counted = wire::router(inner).layer(axum::middleware::from_fn_with_state(hits.clone(), count));
    let addr = spawn_local(counted).unwrap();
    let r = HttpBackend::connect_with(&format!("http://{addr}"), 3, Duration::from_millis(5)).unwrap();
    let err = r.generate(&GenerationRequest::new("a b c d e f").with_max_tokens(5)).unwrap_err();
    assert_eq!(err, BackendError::ContextOverflow { tokens: 6, limit: 5 });
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

async fn count(
    State(hits): State<Arc<AtomicUsize>>,
    req: axum::extract::Request,
    next: axum::middleware::Next,
) -> axum::response::Response {
    if req.uri().path() == "/v1/generate" {
        hits.fetch_add(1, Ordering::SeqCst);
    }
    next.run(req).await
}

/// A server whose generate endpoint fails `failures` times with 503.
fn flaky(failures: usize) -> (String, Arc<AtomicUsize>) {
    let hits = Arc::new(AtomicUsize::new(0));
    let app = Router::new()
        .route("/v1/info", get(|| async { Json(json!({"name": "flaky", "context_window": 100})) }))
        .route(
            "/v1/generate",
            post(move |State(hits): State<Arc<AtomicUsize>>| async move {
                if hits.fetch_add(1, Ordering::SeqCst) < failures {
                    (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": "", "message": "busy"})))
                } else {
                    (StatusCode::OK, Json(json!({"text": " ok\nignored"})))
                }
            }),
        )
        .with_state(hits.clone());
    (format!("http://{}", spawn_local(app).unwrap()), hits)
}

#[test]
fn transport_failures_are_retried_three_times() {
    let (url, hits) = flaky(2);
    let r = HttpBackend::connect_with(&url, 3, Duration::from_millis(5)).unwrap();
    assert_eq!(r.generate(&GenerationRequest::new("x")).unwrap(), " ok");
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let (url, hits) = flaky(5);
    let r = HttpBackend::connect_with(&url, 3, Duration::from_millis(5)).unwrap();
    assert!(matches!(r.generate(&GenerationRequest::new("x")), Err(BackendError::Transport(_))));
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = HttpBackend::connect_with(&format!("http://127.0.0.1:{port}"), 2, Duration::from_millis(1)).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
}

#[test]
fn sampling_requests_are_rejected() {
    let addr = spawn_local(wire::router(mock())).unwrap();
    let r = reqwest::blocking::Client::new()
        .post(format!("http://{addr}/v1/generate"))
        .json(&json!({"context": "x", "max_tokens": 3, "stop": ["\n"], "greedy": false}))
        .send()
        .unwrap();
    assert_eq!(r.status(), 400);
    let body: serde_json::Value = r.json().unwrap();
    assert_eq!(body["error"], "invalid_request");
}
