//! Live search over HTTP.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use fsb_core::retrieval::{first_sentence, KnowledgeSource, KnowledgeText, RetrievalError, RetrievedKnowledge, SearchClient};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct Hit {
    first_sentence: String,
    #[serde(default)]
    url: String,
}

/// Queries `GET {endpoint}?q=...`, which answers `{first_sentence, url}` for
/// the top hit or 404 when nothing matches.
///
/// Requests are serialized and spaced at least `min_interval` apart.
pub struct HttpSearch {
    endpoint: String,
    client: Client,
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl HttpSearch {
    pub fn new(endpoint: impl Into<String>, min_interval: Duration) -> Result<Self, RetrievalError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| RetrievalError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
            min_interval,
            last: Mutex::new(None),
        })
    }
}

impl SearchClient for HttpSearch {
    fn search(&self, query: &str) -> Result<RetrievedKnowledge, RetrievalError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(prev) = *last {
            let wait = self.min_interval.saturating_sub(prev.elapsed());
            std::thread::sleep(wait);
        }
        *last = Some(Instant::now());
        let resp = self
            .client
            .get(&self.endpoint)
            .query(&[("q", query)])
            .send()
            .map_err(|e| RetrievalError::Transport(e.to_string()))?;
        match resp.status() {
            StatusCode::NOT_FOUND => Err(RetrievalError::NotFound(query.to_string())),
            s if s.is_server_error() => Err(RetrievalError::Transport(format!("HTTP {s}"))),
            s if !s.is_success() => Err(RetrievalError::Io(format!("HTTP {s}"))),
            _ => {
                let hit: Hit = resp.json().map_err(|e| RetrievalError::Io(e.to_string()))?;
                Ok(RetrievedKnowledge {
                    source: KnowledgeSource::Search,
                    text: KnowledgeText::Sentence(first_sentence(&hit.first_sentence)),
                    provenance: hit.url,
                })
            }
        }
    }
}
