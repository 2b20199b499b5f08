//! Chat session API.
//!
//! ```text
//! POST /api/sessions                 -> 201 {id}
//! POST /api/sessions/{id}/message    {text, style?, pin_skill?, caption?} -> ResponseBundle
//! GET  /api/sessions/{id}            -> {id, history, memory, transcript}
//! GET  /api/skills                   -> [{id, knowledge, parser, selectable, shots}]
//! GET  /api/styles                   -> [style]
//! GET  /                             -> chat page
//! ```

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fsb_core::bot::{BotError, Conversation, FewShotBot, KnowledgeNeed, ResponseBundle, StepOptions};
use fsb_core::dialogue::{Memory, Turn};
use serde::{Deserialize, Serialize};

use crate::store::{SessionStore, StoreError};

const PAGE: &str = include_str!("../www/index.html");

#[derive(Clone)]
pub struct AppState {
    pub bot: Arc<FewShotBot>,
    pub store: Arc<SessionStore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MessageBody {
    pub text: String,
    #[serde(default)]
    pub style: Option<String>,
    #[serde(default)]
    pub pin_skill: Option<String>,
    /// Caption of an image shared with this utterance.
    #[serde(default)]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub history: Vec<Turn>,
    pub memory: Memory,
    pub transcript: Vec<ResponseBundle>,
}

impl From<Conversation> for SessionView {
    fn from(c: Conversation) -> Self {
        Self {
            id: c.dialogue.id,
            history: c.dialogue.turns,
            memory: c.memory,
            transcript: c.transcript,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillView {
    pub id: String,
    pub knowledge: KnowledgeNeed,
    pub parser: Option<String>,
    pub selectable: bool,
    pub shots: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suggestions: Vec<String>,
}

pub struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self(
            status,
            ApiError {
                error: message.into(),
                suggestions: Vec::new(),
            },
        )
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl<E> From<StoreError<E>> for Failure
where
    Failure: From<E>,
{
    fn from(e: StoreError<E>) -> Self {
        match e {
            StoreError::NotFound(id) => Failure::new(StatusCode::NOT_FOUND, format!("no session {id}")),
            StoreError::Io(m) => Failure::new(StatusCode::INTERNAL_SERVER_ERROR, m),
            StoreError::Step(inner) => inner.into(),
        }
    }
}

impl From<std::convert::Infallible> for Failure {
    fn from(e: std::convert::Infallible) -> Self {
        match e {}
    }
}

impl From<BotError> for Failure {
    fn from(e: BotError) -> Self {
        let status = match &e {
            BotError::UnknownSkill(_) | BotError::Unavailable(..) | BotError::UnknownStyle { .. } | BotError::EmptyMessage => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            BotError::Prompt(_) => StatusCode::PAYLOAD_TOO_LARGE,
            BotError::Backend(_) | BotError::Selection(_) | BotError::Parse(_) => StatusCode::BAD_GATEWAY,
            BotError::Load(_) | BotError::Render(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let suggestions = match &e {
            BotError::UnknownStyle { suggestions, .. } => suggestions.clone(),
            _ => Vec::new(),
        };
        Failure(
            status,
            ApiError {
                error: e.to_string(),
                suggestions,
            },
        )
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Failure> + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn create(State(s): State<AppState>) -> Result<(StatusCode, Json<Created>), Failure> {
    let id = blocking(move || s.store.create().map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))).await?;
    Ok((StatusCode::CREATED, Json(Created { id })))
}

async fn session(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, Failure> {
    let conv = blocking(move || Ok(s.store.load(&id)?)).await?;
    Ok(Json(conv.into()))
}

async fn message(State(s): State<AppState>, Path(id): Path<String>, Json(body): Json<MessageBody>) -> Result<Json<ResponseBundle>, Failure> {
    let bundle = blocking(move || {
        Ok(s.store.update(&id, |conv| {
            conv.dialogue.image_caption = body.caption.clone();
            match (&body.style, &body.pin_skill) {
                (Some(style), None) => s.bot.styled_reply(conv, &body.text, style),
                _ => {
                    let options = StepOptions {
                        skill: body.pin_skill.clone(),
                        style: body.style.clone(),
                    };
                    s.bot.step(conv, &body.text, &options)
                }
            }
        })?)
    })
    .await?;
    Ok(Json(bundle))
}

async fn skills(State(s): State<AppState>) -> Json<Vec<SkillView>> {
    let views = s
        .bot
        .skills()
        .iter()
        .map(|k| SkillView {
            id: k.id.clone(),
            knowledge: k.knowledge,
            parser: k.parser.clone(),
            selectable: k.selectable,
            shots: k.shot_count(),
        })
        .collect();
    Json(views)
}

async fn styles(State(s): State<AppState>) -> Json<Vec<String>> {
    Json(s.bot.config().styles.clone())
}

async fn page() -> Html<&'static str> {
    Html(PAGE)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(page))
        .route("/api/sessions", post(create))
        .route("/api/sessions/{id}", get(session))
        .route("/api/sessions/{id}/message", post(message))
        .route("/api/skills", get(skills))
        .route("/api/styles", get(styles))
        .with_state(state)
}
