#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use fsb_core::backend::{LanguageModel, MockSpec};
use fsb_core::bot::{BotConfig, BotFiles, FewShotBot};
use fsb_service::api::{self, AppState};
use fsb_service::store::SessionStore;

pub fn e2e(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/e2e").join(name)
}

pub fn read(name: &str) -> String {
    std::fs::read_to_string(e2e(name)).unwrap()
}

pub fn mock() -> Arc<dyn LanguageModel> {
    serde_json::from_str::<MockSpec>(&read("mock.json")).unwrap().build()
}

pub fn bot(lm: Arc<dyn LanguageModel>) -> FewShotBot {
    BotFiles {
        wiki: Some(e2e("wiki.jsonl")),
        search: Some(e2e("search.jsonl")),
        kg: Some(e2e("kg.tsv")),
        styles: Some(e2e("styles.txt")),
        ..BotFiles::default()
    }
    .build(lm, BotConfig::default())
    .unwrap()
}

pub struct Script {
    pub messages: Vec<String>,
    pub skills: Vec<String>,
    pub fault_turn: usize,
    pub fault_marker: String,
}

pub fn script() -> Script {
    let v: serde_json::Value = serde_json::from_str(&read("script.json")).unwrap();
    let strings = |k: &str| v[k].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect();
    Script {
        messages: strings("messages"),
        skills: strings("skills"),
        fault_turn: v["fault_turn"].as_u64().unwrap() as usize,
        fault_marker: v["fault_marker"].as_str().unwrap().to_string(),
    }
}

/// A chat service on a loopback port, with sessions under `dir`.
pub fn chat_service(lm: Arc<dyn LanguageModel>, dir: &std::path::Path) -> String {
    let state = AppState {
        bot: Arc::new(bot(lm)),
        store: Arc::new(SessionStore::open(dir).unwrap()),
    };
    let addr = fsb_service::spawn_local(api::router(state)).unwrap();
    format!("http://{addr}")
}

pub struct Client {
    pub base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(base: &str) -> Self {
        Self {
            base: base.to_string(),
            http: reqwest::blocking::Client::new(),
        }
    }

    pub fn post(&self, path: &str, body: serde_json::Value) -> (u16, serde_json::Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().unwrap();
        (r.status().as_u16(), r.json().unwrap_or(serde_json::Value::Null))
    }

    pub fn get(&self, path: &str) -> (u16, serde_json::Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().unwrap();
        (r.status().as_u16(), r.json().unwrap_or(serde_json::Value::Null))
    }

    pub fn create(&self) -> String {
        let (status, body) = self.post("/api/sessions", serde_json::json!({}));
        assert_eq!(status, 201);
        body["id"].as_str().unwrap().to_string()
    }

    /// Sends a message; returns the status and the raw body.
    pub fn say(&self, id: &str, text: &str) -> (u16, String) {
        let r = self
            .http
            .post(format!("{}/api/sessions/{id}/message", self.base))
            .json(&serde_json::json!({ "text": text }))
            .send()
            .unwrap();
        (r.status().as_u16(), r.text().unwrap())
    }

    /// Plays `messages` in a fresh session; returns the id and the reply
    /// bodies one per line.
    pub fn replay(&self, messages: &[String]) -> (String, String) {
        let id = self.create();
        let mut out = String::new();
        for m in messages {
            let (status, body) = self.say(&id, m);
            assert_eq!(status, 200, "{body}");
            out += &body;
            out.push('\n');
        }
        (id, out)
    }
}
