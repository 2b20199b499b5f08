//! The language-model boundary.
//!
//! A backend generates greedily and scores continuations token by token
//! (natural-log probabilities of each continuation token given the context
//! and the preceding continuation tokens). Everything else in the crate is
//! written against [`LanguageModel`], so a remote server and the in-process
//! mocks in [`mock`] are interchangeable.

pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{EchoBackend, EchoRule, FaultyBackend, LookupBackend, LookupRule, MockSpec, SplitBackend, UniformBackend};

/// Default cap on generated tokens.
pub const DEFAULT_MAX_TOKENS: usize = 150;
/// Default end-of-output marker.
pub const DEFAULT_STOP: &str = "\n";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("context needs {tokens} tokens, window allows {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("perplexity of an empty continuation is undefined")]
    EmptyContinuation,
    #[error("injected fault: {0}")]
    Fault(String),
}

impl BackendError {
    /// Only transport failures are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub context: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_stops", rename = "stop")]
    pub stop_sequences: Vec<String>,
}

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

fn default_stops() -> Vec<String> {
    vec![DEFAULT_STOP.to_string()]
}

impl GenerationRequest {
    /// Greedy request with the default token cap and `"\n"` as stop.
    pub fn new(context: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_sequences: default_stops(),
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_stops(mut self, stops: Vec<String>) -> Self {
        self.stop_sequences = stops;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.stop_sequences.is_empty() || self.stop_sequences.iter().any(String::is_empty) {
            return Err(BackendError::InvalidRequest("stop sequences must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl ScoredContinuation {
    pub fn new(tokens: Vec<String>, logprobs: Vec<f64>) -> Result<Self, BackendError> {
        if tokens.len() != logprobs.len() {
            return Err(BackendError::Protocol(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            )));
        }
        if let Some(bad) = logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(BackendError::Protocol(format!("logprob {bad} is not <= 0")));
        }
        Ok(Self { tokens, logprobs })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn total(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    /// `exp(-mean logprob)`; `None` for an empty continuation.
    ///
    /// The mean is taken relative to the first logprob, so equal logprobs
    /// give that logprob back without rounding.
    pub fn perplexity(&self) -> Option<f64> {
        let first = *self.logprobs.first()?;
        let n = self.logprobs.len() as f64;
        let mean = first + self.logprobs.iter().map(|lp| lp - first).sum::<f64>() / n;
        Some(1.0 / mean.exp())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub context_window: usize,
}

pub trait TokenCounter {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError>;
}

/// A greedy-decoding language model that can also score text.
///
/// Implementations take `&self` and must tolerate concurrent calls.
pub trait LanguageModel: TokenCounter + Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Greedy continuation of `req.context`, cut before the first stop
    /// sequence or after `req.max_tokens` tokens.
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError>;

    /// Per-token log-probabilities of `continuation` given `context`.
    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError>;
}

impl<T: LanguageModel + ?Sized> TokenCounter for std::sync::Arc<T> {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        (**self).count_tokens(text)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn descriptor(&self) -> BackendDescriptor {
        (**self).descriptor()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        (**self).generate(req)
    }
    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        (**self).score(context, continuation)
    }
}

/// Perplexity of `continuation` given `context`.
pub fn perplexity(lm: &dyn LanguageModel, context: &str, continuation: &str) -> Result<f64, BackendError> {
    if continuation.is_empty() {
        return Err(BackendError::EmptyContinuation);
    }
    lm.score(context, continuation)?.perplexity().ok_or(BackendError::EmptyContinuation)
}

/// Counts whitespace-delimited words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        Ok(text.split_whitespace().count())
    }
}

/// Lossless split used by the mocks: each piece is a run of whitespace
/// followed by a run of non-whitespace, so concatenating the pieces gives
/// back the input. Trailing whitespace forms a piece of its own.
pub fn split_pieces(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && in_word {
            pieces.push(&text[start..i]);
            start = i;
        }
        in_word = !ws;
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

/// Cuts generated text before the earliest stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops.iter().filter_map(|s| text.find(s.as_str())).min();
    match cut {
        Some(i) => &text[..i],
        None => text,
    }
}

/// Applies the token cap (in pieces) and then the stop sequences.
pub fn finish_generation(text: &str, req: &GenerationRequest) -> String {
    let capped: String = split_pieces(text).into_iter().take(req.max_tokens).collect();
    truncate_at_stop(&capped, &req.stop_sequences).to_string()
}

/// Retries `op` on retryable errors, sleeping `base`, `2*base`, ... between
/// attempts.
pub fn with_retries<T>(
    attempts: usize,
    base: std::time::Duration,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut delay = base;
    let mut attempt = 1;
    loop {
        match op() {
            Err(e) if e.is_retryable() && attempt < attempts => {
                std::thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
            other => return other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn pieces_are_lossless() {
        assert_eq!(split_pieces("a b  c"), vec!["a", " b", "  c"]);
        assert_eq!(split_pieces(" Historical fiction\t~has_genre\t"), vec![" Historical", " fiction", "\t~has_genre", "\t"]);
        assert_eq!(split_pieces(""), Vec::<&str>::new());
        assert_eq!(split_pieces("a "), vec!["a", " "]);
    }

    #[test]
    fn whitespace_counts() {
        assert_eq!(WhitespaceTokens.count_tokens("").unwrap(), 0);
        assert_eq!(WhitespaceTokens.count_tokens("a b c").unwrap(), 3);
        assert_eq!(WhitespaceTokens.count_tokens("Dialogue:\nUser: hi").unwrap(), 3);
    }

    #[test]
    fn stop_truncation() {
        // oracle: scan for the stop sequence by hand
        let req = GenerationRequest::new("ctx");
        assert_eq!(finish_generation(" a b c\nd e", &req), " a b c");
        assert_eq!(finish_generation("a b c d", &req.clone().with_max_tokens(2)), "a b");
        let tab = req.with_stops(vec!["\t".into(), "\n".into()]);
        assert_eq!(finish_generation(" x\ty\nz", &tab), " x");
    }

    #[test]
    fn request_validation() {
        assert!(GenerationRequest::new("c").with_max_tokens(0).validate().is_err());
        assert!(GenerationRequest::new("c").with_stops(vec![]).validate().is_err());
        assert!(GenerationRequest::new("c").validate().is_ok());
    }

    #[test]
    fn scored_continuation_checks() {
        assert!(ScoredContinuation::new(vec!["a".into()], vec![]).is_err());
        assert!(ScoredContinuation::new(vec!["a".into()], vec![0.1]).is_err());
        let s = ScoredContinuation::new(vec!["a".into(), "b".into()], vec![0.5f64.ln(), 0.25f64.ln()]).unwrap();
        // closed form: exp(-(ln 0.5 + ln 0.25)/2) = 2*sqrt(2)
        assert!((s.perplexity().unwrap() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(ScoredContinuation::new(vec![], vec![]).unwrap().perplexity(), None);
    }

    #[test]
    fn retries_only_transport_errors() {
        let calls = Cell::new(0);
        let r: Result<(), _> = with_retries(3, std::time::Duration::from_millis(1), || {
            calls.set(calls.get() + 1);
            Err(BackendError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 3);
        calls.set(0);
        let r: Result<(), _> = with_retries(3, std::time::Duration::from_millis(1), || {
            calls.set(calls.get() + 1);
            Err(BackendError::ContextOverflow { tokens: 9, limit: 4 })
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 1);
    }
}
