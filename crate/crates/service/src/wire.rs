//! The `/v1` LM wire protocol.
//!
//! ```text
//! POST /v1/generate  {context, max_tokens, stop:[...], greedy:true} -> {text}
//! POST /v1/score     {context, continuation} -> {tokens:[...], logprobs:[...]}
//! POST /v1/tokenize  {text} -> {count}
//! GET  /v1/info      -> {name, context_window}
//! ```
//!
//! Errors come back as `{error, message, tokens?, limit?}` with `error` one
//! of `context_overflow`, `invalid_request`, `fault` or `internal`.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fsb_core::backend::{BackendDescriptor, BackendError, GenerationRequest, LanguageModel, ScoredContinuation};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateBody {
    #[serde(flatten)]
    pub request: GenerationRequest,
    #[serde(default = "yes")]
    pub greedy: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateReply {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreBody {
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizeBody {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizeReply {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

impl WireError {
    pub fn from_backend(e: &BackendError) -> (StatusCode, Self) {
        let (status, kind, tokens, limit) = match e {
            BackendError::ContextOverflow { tokens, limit } => (StatusCode::BAD_REQUEST, "context_overflow", Some(*tokens), Some(*limit)),
            BackendError::InvalidRequest(_) | BackendError::EmptyContinuation => (StatusCode::BAD_REQUEST, "invalid_request", None, None),
            BackendError::Fault(_) => (StatusCode::INTERNAL_SERVER_ERROR, "fault", None, None),
            BackendError::Transport(_) | BackendError::Protocol(_) => (StatusCode::BAD_GATEWAY, "internal", None, None),
        };
        let body = WireError {
            error: kind.into(),
            message: e.to_string(),
            tokens,
            limit,
        };
        (status, body)
    }

    /// The client-side error for a non-success reply. Only server
    /// unavailability counts as transport.
    pub fn into_backend(self, status: u16) -> BackendError {
        match (self.error.as_str(), self.tokens, self.limit) {
            ("context_overflow", Some(tokens), Some(limit)) => BackendError::ContextOverflow { tokens, limit },
            ("invalid_request", ..) => BackendError::InvalidRequest(self.message),
            ("fault", ..) => BackendError::Fault(self.message),
            _ if status >= 500 => BackendError::Transport(format!("HTTP {status}: {}", self.message)),
            _ => BackendError::Protocol(format!("HTTP {status}: {}", self.message)),
        }
    }
}

struct Failure(BackendError);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let (status, body) = WireError::from_backend(&self.0);
        (status, Json(body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, BackendError> + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure(BackendError::Protocol(e.to_string())))?
        .map_err(Failure)
}

type Lm = Arc<dyn LanguageModel>;

async fn info(State(lm): State<Lm>) -> Json<BackendDescriptor> {
    Json(lm.descriptor())
}

async fn generate(State(lm): State<Lm>, Json(body): Json<GenerateBody>) -> Result<Json<GenerateReply>, Failure> {
    if !body.greedy {
        return Err(Failure(BackendError::InvalidRequest("only greedy decoding is served".into())));
    }
    let text = blocking(move || {
        body.request.validate()?;
        lm.generate(&body.request)
    })
    .await?;
    Ok(Json(GenerateReply { text }))
}

async fn score(State(lm): State<Lm>, Json(body): Json<ScoreBody>) -> Result<Json<ScoredContinuation>, Failure> {
    Ok(Json(blocking(move || lm.score(&body.context, &body.continuation)).await?))
}

async fn tokenize(State(lm): State<Lm>, Json(body): Json<TokenizeBody>) -> Result<Json<TokenizeReply>, Failure> {
    let count = blocking(move || lm.count_tokens(&body.text)).await?;
    Ok(Json(TokenizeReply { count }))
}

/// Serves `lm` over the wire protocol.
pub fn router(lm: Arc<dyn LanguageModel>) -> Router {
    Router::new()
        .route("/v1/info", get(info))
        .route("/v1/generate", post(generate))
        .route("/v1/score", post(score))
        .route("/v1/tokenize", post(tokenize))
        .with_state(lm)
}
