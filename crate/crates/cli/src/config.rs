use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use fsb_core::backend::{LanguageModel, MockSpec, UniformBackend};
use fsb_core::bot::{BotConfig, BotFiles, FewShotBot};
use fsb_service::remote::HttpBackend;
use fsb_service::search::HttpSearch;
use serde::Deserialize;

/// `fsb.toml`. Relative paths are taken from the file's directory.
///
/// ```toml
/// backend = "http://127.0.0.1:8000"   # or "mock:mock.json", "uniform:50"
/// shots = "shots.jsonl"
/// templates = "templates.toml"
/// wiki = "wiki.jsonl"
/// search = "search.jsonl"              # or search_url for a live engine
/// kg = "kg.tsv"
/// styles = "styles.txt"
/// sessions = "sessions"
///
/// [bot]
/// persona = ["I like hiking."]
/// ```
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: Option<String>,
    pub templates: Option<PathBuf>,
    pub shots: Option<PathBuf>,
    pub wiki: Option<PathBuf>,
    pub search: Option<PathBuf>,
    pub search_url: Option<String>,
    pub search_interval_ms: Option<u64>,
    pub kg: Option<PathBuf>,
    pub styles: Option<PathBuf>,
    pub sessions: Option<PathBuf>,
    pub bot: BotConfig,
    /// Seed for `eval` when the task file sets none.
    pub seed: Option<u64>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.templates,
            &mut config.shots,
            &mut config.wiki,
            &mut config.search,
            &mut config.kg,
            &mut config.styles,
            &mut config.sessions,
        ]
        .into_iter()
        .flatten()
        {
            *p = base.join(&*p);
        }
        if let Some(b) = &mut config.backend {
            if let Some(file) = b.strip_prefix("mock:") {
                *b = format!("mock:{}", base.join(file).display());
            }
        }
        Ok(config)
    }

    pub fn files(&self) -> BotFiles {
        BotFiles {
            templates: self.templates.clone(),
            shots: self.shots.clone(),
            wiki: self.wiki.clone(),
            search: self.search.clone(),
            kg: self.kg.clone(),
            styles: self.styles.clone(),
        }
    }

    pub fn bot(&self, lm: Arc<dyn LanguageModel>) -> Result<FewShotBot> {
        let mut config = self.bot.clone();
        let (registry, shots, mut knowledge) = self.files().load(&mut config)?;
        if let Some(url) = &self.search_url {
            let interval = Duration::from_millis(self.search_interval_ms.unwrap_or(1000));
            knowledge.search = Some(Arc::new(HttpSearch::new(url.clone(), interval)?));
        }
        Ok(FewShotBot::new(lm, registry, &shots, knowledge, config)?)
    }
}

/// `http(s)://...`, `mock:<file>` or `uniform:<vocab size>`.
pub fn backend(spec: &str) -> Result<Arc<dyn LanguageModel>> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Arc::new(HttpBackend::connect(spec).with_context(|| format!("connecting to {spec}"))?));
    }
    if let Some(file) = spec.strip_prefix("mock:") {
        let text = std::fs::read_to_string(file).with_context(|| format!("reading {file}"))?;
        let mock: MockSpec = serde_json::from_str(&text).with_context(|| format!("parsing {file}"))?;
        return Ok(mock.build());
    }
    if let Some(v) = spec.strip_prefix("uniform:") {
        let v: usize = v.parse().with_context(|| format!("vocabulary size {v:?}"))?;
        if v < 2 {
            bail!("vocabulary size must be at least 2");
        }
        return Ok(Arc::new(UniformBackend::new(v)));
    }
    bail!("unrecognized backend {spec:?}; use a URL, mock:<file> or uniform:<V>")
}
