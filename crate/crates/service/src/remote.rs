//! Blocking client for a remote LM server.

use std::time::Duration;

use fsb_core::backend::{truncate_at_stop, with_retries, BackendDescriptor, BackendError, GenerationRequest, LanguageModel, ScoredContinuation, TokenCounter};
use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::wire::{GenerateBody, GenerateReply, ScoreBody, TokenizeBody, TokenizeReply, WireError};

pub const DEFAULT_ATTEMPTS: usize = 3;
pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(250);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

/// A [`LanguageModel`] behind the `/v1` wire protocol.
///
/// Transport failures (connection errors, timeouts, 5xx without a typed
/// error) are retried with exponential backoff; nothing else is.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base: String,
    client: Client,
    info: BackendDescriptor,
    attempts: usize,
    backoff: Duration,
}

impl HttpBackend {
    /// Connects and reads `/v1/info`.
    pub fn connect(base_url: &str) -> Result<Self, BackendError> {
        Self::connect_with(base_url, DEFAULT_ATTEMPTS, DEFAULT_BACKOFF)
    }

    pub fn connect_with(base_url: &str, attempts: usize, backoff: Duration) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(DEFAULT_TIMEOUT)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let mut backend = Self {
            base: base_url.trim_end_matches('/').to_string(),
            client,
            info: BackendDescriptor {
                name: String::new(),
                context_window: 0,
            },
            attempts: attempts.max(1),
            backoff,
        };
        backend.info = backend.call(|c, url| c.get(url), "/v1/info")?;
        Ok(backend)
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        self.call(|c, url| c.post(url).json(body), path)
    }

    fn call<R: DeserializeOwned>(
        &self,
        build: impl Fn(&Client, String) -> reqwest::blocking::RequestBuilder,
        path: &str,
    ) -> Result<R, BackendError> {
        with_retries(self.attempts, self.backoff, || {
            let resp = build(&self.client, format!("{}{}", self.base, path))
                .send()
                .map_err(|e| BackendError::Transport(e.to_string()))?;
            let status = resp.status();
            let bytes = resp.bytes().map_err(|e| BackendError::Transport(e.to_string()))?;
            if status.is_success() {
                return serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(format!("{path}: {e}")));
            }
            let err = serde_json::from_slice::<WireError>(&bytes).unwrap_or_else(|_| WireError {
                error: String::new(),
                message: String::from_utf8_lossy(&bytes).into_owned(),
                tokens: None,
                limit: None,
            });
            Err(err.into_backend(status.as_u16()))
        })
    }
}

impl TokenCounter for HttpBackend {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        let reply: TokenizeReply = self.post("/v1/tokenize", &TokenizeBody { text: text.to_string() })?;
        Ok(reply.count)
    }
}

impl LanguageModel for HttpBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.info.clone()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        req.validate()?;
        let body = GenerateBody {
            request: req.clone(),
            greedy: true,
        };
        let reply: GenerateReply = self.post("/v1/generate", &body)?;
        Ok(truncate_at_stop(&reply.text, &req.stop_sequences).to_string())
    }

    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        let body = ScoreBody {
            context: context.to_string(),
            continuation: continuation.to_string(),
        };
        let raw: ScoredContinuation = self.post("/v1/score", &body)?;
        ScoredContinuation::new(raw.tokens, raw.logprobs)
    }
}
