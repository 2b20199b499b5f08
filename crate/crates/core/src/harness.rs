//! k-shot evaluation: sample shots from the validation split, prompt the
//! model on every test example, score, and report mean and standard
//! deviation across runs with different shot samples.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{perplexity, BackendDescriptor, BackendError, GenerationRequest, LanguageModel, TokenCounter};
use crate::dialogue::{apply_state_update, load_dialogues, Dialogue, DialogueState, GraphPath, KnowledgeItem, ModelError, Triple};
use crate::fanout::map_bounded;
use crate::metrics::{
    bleu4, dst_turn, entity_counts, kf1, path_recall_at_k, rouge_l, rprec, unigram_f1, EntityCounts, EntityList, MetricSummary,
};
use crate::parsing::{constrained_kg_decode, parse_dsl, track_state, ParseError, DEFAULT_PATH_CANDIDATES};
use crate::prompt::{render_shot, ParseOutput, PromptError, PromptText, RenderError, Target, Template, TemplateRegistry, SHOT_SEPARATOR};
use crate::retrieval::{KnowledgeGraph, RetrievalError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("progress log: {0}")]
    Io(String),
}

fn default_shots() -> Vec<usize> {
    vec![0, 1]
}
fn default_runs() -> usize {
    3
}
fn default_max_tokens() -> usize {
    crate::backend::DEFAULT_MAX_TOKENS
}
fn default_stops() -> Vec<String> {
    vec![crate::backend::DEFAULT_STOP.to_string()]
}
fn default_in_flight() -> usize {
    1
}
fn default_ks() -> Vec<usize> {
    vec![1, 3, 5, 10, 25]
}

/// One experiment: a task, its data and the shot counts to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Template id.
    pub task: String,
    pub validation: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Metric names; empty picks the defaults for the task kind.
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_stops")]
    pub stops: Vec<String>,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    /// Knowledge graph TSV, for graph-path tasks.
    #[serde(default)]
    pub kg: Option<PathBuf>,
    /// Global entity list (one per line), for entity F1.
    #[serde(default)]
    pub entities: Option<PathBuf>,
    /// Cut-offs for Path@k and Tgt@k.
    #[serde(default = "default_ks")]
    pub path_ks: Vec<usize>,
}

impl TaskConfig {
    pub fn new(task: impl Into<String>, validation: impl Into<PathBuf>, test: impl Into<PathBuf>) -> Self {
        Self {
            task: task.into(),
            validation: validation.into(),
            test: test.into(),
            shots: default_shots(),
            runs: default_runs(),
            seed: 0,
            metrics: Vec::new(),
            max_tokens: default_max_tokens(),
            stops: default_stops(),
            in_flight: default_in_flight(),
            kg: None,
            entities: None,
            path_ks: default_ks(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.runs == 0 {
            return Err(EvalError::Config("runs must be at least 1".into()));
        }
        if self.shots.is_empty() {
            return Err(EvalError::Config("no shot counts given".into()));
        }
        GenerationRequest::new("")
            .with_max_tokens(self.max_tokens)
            .with_stops(self.stops.clone())
            .validate()
            .map_err(|e| EvalError::Config(e.to_string()))
    }

    /// Loads the files the config points at.
    pub fn load_data(&self) -> Result<EvalData, EvalError> {
        let entities = match &self.entities {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| EvalError::Io(format!("{}: {e}", p.display())))?;
                Some(EntityList::new(text.lines().filter(|l| !l.trim().is_empty())).map_err(|e| EvalError::Config(e.to_string()))?)
            }
            None => None,
        };
        Ok(EvalData {
            validation: load_dialogues(&self.validation)?,
            test: load_dialogues(&self.test)?,
            kg: self.kg.as_ref().map(KnowledgeGraph::load).transpose()?,
            entities,
        })
    }
}

pub struct EvalData {
    pub validation: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub kg: Option<KnowledgeGraph>,
    pub entities: Option<EntityList>,
}

/// Uniform sample of `k` dialogues without replacement, fixed by
/// `(seed, run_index)`.
pub fn sample_shots(validation: &[Dialogue], k: usize, seed: u64, run_index: u64) -> Result<Vec<Dialogue>, EvalError> {
    if k > validation.len() {
        return Err(EvalError::Config(format!(
            "{k} shots requested but the validation split has {} dialogues",
            validation.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run_index);
    Ok(rand::seq::index::sample(&mut rng, validation.len(), k)
        .into_iter()
        .map(|i| validation[i].clone())
        .collect())
}

/// Keeps the most recent shots that fit `budget` together with `query`,
/// returning them as a prompt without the query.
pub fn fit_shots(rendered: &[String], query: &str, budget: usize, counter: &dyn TokenCounter) -> Result<PromptText, PromptError> {
    let full = crate::prompt::assemble_rendered(rendered, query, budget, counter)?;
    let kept = &rendered[rendered.len() - full.shot_count..];
    let text = kept.join(SHOT_SEPARATOR);
    Ok(PromptText {
        token_count: counter.count_tokens(&text)?,
        text,
        shot_count: kept.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Outcome {
    Scored {
        metrics: BTreeMap<String, f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        entities: Option<EntityCounts>,
        prompt_tokens: usize,
        prompt_shots: usize,
    },
    Failed {
        error: String,
    },
}

/// One line of the progress log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub task: String,
    pub shots: usize,
    pub run: usize,
    pub example: String,
    #[serde(flatten)]
    pub outcome: Outcome,
}

type ProgressKey = (String, usize, usize, String);

fn key_of(r: &ProgressRecord) -> ProgressKey {
    (r.task.clone(), r.shots, r.run, r.example.clone())
}

/// Reads a progress log. Lines that do not parse (such as a line cut short
/// by a crash) are skipped.
pub fn read_progress(path: &Path) -> Result<HashMap<ProgressKey, ProgressRecord>, EvalError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(EvalError::Io(e.to_string())),
    };
    let mut out = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
        if let Ok(rec) = serde_json::from_str::<ProgressRecord>(&line) {
            out.insert(key_of(&rec), rec);
        }
    }
    Ok(out)
}

struct ProgressLog {
    file: Option<Mutex<File>>,
}

impl ProgressLog {
    fn open(path: Option<&Path>) -> Result<Self, EvalError> {
        let file = match path {
            Some(p) => {
                // a torn last line must not swallow the next record
                let needs_newline = std::fs::read(p).map(|b| b.last().is_some_and(|c| *c != b'\n')).unwrap_or(false);
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| EvalError::Io(format!("{}: {e}", p.display())))?;
                if needs_newline {
                    f.write_all(b"\n").map_err(|e| EvalError::Io(e.to_string()))?;
                }
                Some(Mutex::new(f))
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn append(&self, records: &[ProgressRecord]) -> Result<(), EvalError> {
        let Some(file) = &self.file else { return Ok(()) };
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).expect("records serialize"));
            text.push('\n');
        }
        let mut f = file.lock().expect("log lock");
        f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| EvalError::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    /// Ids of the sampled shot dialogues.
    pub shot_ids: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub scored: usize,
    /// Examples whose generation failed; excluded from the metrics.
    pub failed: Vec<String>,
    pub max_prompt_tokens: usize,
    /// Per-example metric values.
    pub examples: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotResult {
    pub shots: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub failed: usize,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub backend: BackendDescriptor,
    pub seed: u64,
    pub max_tokens: usize,
    /// Prompt budget: context window minus `max_tokens`.
    pub budget: usize,
    pub results: Vec<ShotResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<(String, BTreeMap<String, MetricSummary>)> = self
            .results
            .iter()
            .map(|r| (format!("{}-shot", r.shots), r.metrics.clone()))
            .collect();
        crate::metrics::text_table(&rows)
    }
}

/// A unit of work: one target turn, or one whole dialogue for state tracking.
struct Unit<'a> {
    dialogue: &'a Dialogue,
    turns: Vec<usize>,
}

fn example_id(d: &Dialogue, turn: usize) -> String {
    format!("{}#{turn}", d.id)
}

fn gold_text(template: &Template, turn: &crate::dialogue::Turn) -> Option<String> {
    match template.inline.as_ref()?.output() {
        ParseOutput::TitleQuery | ParseOutput::SearchQuery => turn.query.clone(),
        ParseOutput::PersonaLine => turn.knowledge.iter().find_map(|k| match k {
            KnowledgeItem::Persona { text } => Some(text.clone()),
            _ => None,
        }),
        _ => None,
    }
}

fn gold_path(turn: &crate::dialogue::Turn) -> Option<GraphPath> {
    let triples: Vec<Triple> = turn
        .knowledge
        .iter()
        .filter_map(|k| match k {
            KnowledgeItem::Triple { triple } => Some(Triple::from(triple.clone())),
            _ => None,
        })
        .collect();
    GraphPath::new(triples).ok().or_else(|| turn.gold_path.clone())
}

fn units<'a>(template: &Template, test: &'a [Dialogue]) -> Vec<Unit<'a>> {
    let mut out = Vec::new();
    for d in test {
        if !template.is_parsing() {
            for (i, t) in d.turns.iter().enumerate().skip(1) {
                if template.target == Target::Any || !t.is_user() {
                    out.push(Unit { dialogue: d, turns: vec![i] });
                }
            }
            continue;
        }
        let output = template.inline.as_ref().expect("parsing templates have an inline line").output();
        let users = d.turns.iter().enumerate().filter(|(_, t)| t.is_user());
        match output {
            ParseOutput::StateUpdate => {
                let turns: Vec<usize> = users.map(|(i, _)| i).collect();
                if !turns.is_empty() {
                    out.push(Unit { dialogue: d, turns });
                }
            }
            ParseOutput::GraphPath => {
                out.extend(users.filter(|(_, t)| gold_path(t).is_some()).map(|(i, _)| Unit { dialogue: d, turns: vec![i] }))
            }
            _ => out.extend(
                users
                    .filter(|(_, t)| gold_text(template, t).is_some())
                    .map(|(i, _)| Unit { dialogue: d, turns: vec![i] }),
            ),
        }
    }
    out
}

struct RunContext<'a> {
    template: &'a Template,
    config: &'a TaskConfig,
    data: &'a EvalData,
    lm: &'a dyn LanguageModel,
    rendered_shots: Vec<String>,
    budget: usize,
    metrics: &'a [String],
}

fn wants(ctx: &RunContext<'_>, metric: &str) -> bool {
    ctx.metrics.iter().any(|m| m == metric)
}

fn scored(metrics: BTreeMap<String, f64>, prompt: &PromptText) -> Outcome {
    Outcome::Scored {
        metrics,
        entities: None,
        prompt_tokens: prompt.token_count,
        prompt_shots: prompt.shot_count,
    }
}

fn failed(e: impl std::fmt::Display) -> Outcome {
    Outcome::Failed { error: e.to_string() }
}

fn eval_generation(ctx: &RunContext<'_>, d: &Dialogue, i: usize) -> Outcome {
    let query = match render_shot(d, ctx.template, Some(i)) {
        Ok(q) => q,
        Err(e) => return failed(e),
    };
    let prompt = match crate::prompt::assemble_rendered(&ctx.rendered_shots, &query, ctx.budget, ctx.lm) {
        Ok(p) => p,
        Err(e) => return failed(e),
    };
    let req = GenerationRequest::new(prompt.text.clone())
        .with_max_tokens(ctx.config.max_tokens)
        .with_stops(ctx.config.stops.clone());
    let prediction = match ctx.lm.generate(&req) {
        Ok(p) => p.trim().to_string(),
        Err(e) => return failed(e),
    };
    let gold = &d.turns[i].text;
    let mut m = BTreeMap::new();
    for (name, f) in [("f1", unigram_f1 as fn(&str, &str) -> f64), ("bleu4", bleu4), ("rouge_l", rouge_l)] {
        if wants(ctx, name) {
            m.insert(name.to_string(), f(&prediction, gold));
        }
    }
    if wants(ctx, "kf1") {
        let knowledge: Vec<&str> = d.turns[..i]
            .iter()
            .rev()
            .find(|t| t.is_user())
            .into_iter()
            .flat_map(|t| &t.knowledge)
            .filter_map(|k| match k {
                KnowledgeItem::Text { text } => Some(text.as_str()),
                _ => None,
            })
            .collect();
        if !knowledge.is_empty() {
            m.insert("kf1".into(), kf1(&prediction, &knowledge.join(" ")));
        }
    }
    if wants(ctx, "ppl") {
        match perplexity(ctx.lm, &prompt.text, &format!(" {gold}")) {
            Ok(p) => {
                m.insert("ppl".into(), p);
            }
            Err(e) => return failed(e),
        }
    }
    let entities = match (&ctx.data.entities, wants(ctx, "entity_f1")) {
        (Some(list), true) => Some(entity_counts(&prediction, &list.detect(gold), list)),
        _ => None,
    };
    Outcome::Scored {
        metrics: m,
        entities,
        prompt_tokens: prompt.token_count,
        prompt_shots: prompt.shot_count,
    }
}

fn shots_for(ctx: &RunContext<'_>, query: &str) -> Result<PromptText, PromptError> {
    fit_shots(&ctx.rendered_shots, query, ctx.budget, ctx.lm)
}

fn eval_parse(ctx: &RunContext<'_>, d: &Dialogue, i: usize) -> Outcome {
    let history = d.prefix(i + 1);
    let query = match render_shot(d, ctx.template, Some(i)) {
        Ok(q) => q,
        Err(e) => return failed(e),
    };
    let prompt = match shots_for(ctx, &query) {
        Ok(p) => p,
        Err(e) => return failed(e),
    };
    let output = ctx.template.inline.as_ref().expect("parsing template").output();
    let mut m = BTreeMap::new();
    if output == ParseOutput::GraphPath {
        let Some(kg) = &ctx.data.kg else {
            return failed("graph-path task without a knowledge graph");
        };
        let gold = gold_path(&d.turns[i]).expect("units only hold annotated turns");
        let decoded = match constrained_kg_decode(&history, ctx.template, &prompt, ctx.lm, kg, DEFAULT_PATH_CANDIDATES, 1) {
            Ok(r) => r,
            Err(e) => return failed(e),
        };
        for r in path_recall_at_k(&decoded.paths(), &gold, &ctx.config.path_ks) {
            m.insert(format!("path@{}", r.k), r.path);
            m.insert(format!("tgt@{}", r.k), r.target);
        }
        return scored(m, &prompt);
    }
    let gold = gold_text(ctx.template, &d.turns[i]).expect("units only hold annotated turns");
    let result = match parse_dsl(&history, ctx.template, &prompt, ctx.lm) {
        Ok(r) => r,
        Err(ParseError::Empty) => crate::parsing::ParseResult {
            value: crate::parsing::ParsedValue::None,
            raw: String::new(),
        },
        Err(e) => return failed(e),
    };
    let prediction = result.text().unwrap_or(crate::parsing::NONE_TOKEN);
    if wants(ctx, "f1") {
        m.insert("f1".into(), unigram_f1(prediction, &gold));
    }
    if wants(ctx, "rprec") {
        m.insert("rprec".into(), rprec(prediction, &gold));
    }
    scored(m, &prompt)
}

fn eval_state(ctx: &RunContext<'_>, d: &Dialogue) -> Vec<Outcome> {
    let users = d.turns.iter().filter(|t| t.is_user()).count();
    let last = d.last_user_index().expect("units hold dialogues with user turns");
    let all_failed = |e: String| vec![failed(e); users];
    // the longest query bounds every turn's prompt
    let query = match render_shot(d, ctx.template, Some(last)) {
        Ok(q) => q,
        Err(e) => return all_failed(e.to_string()),
    };
    let prompt = match shots_for(ctx, &query) {
        Ok(p) => p,
        Err(e) => return all_failed(e.to_string()),
    };
    let track = match track_state(d, ctx.template, &prompt, ctx.lm) {
        Ok(t) => t,
        Err(e) => return all_failed(e.to_string()),
    };
    let mut gold = DialogueState::new();
    let mut out = Vec::new();
    for (predicted, turn) in track.states.iter().zip(d.turns.iter().filter(|t| t.is_user())) {
        if let Some(update) = &turn.state_update {
            gold = apply_state_update(&gold, update).expect("validated on load");
        }
        let (joint, right, total) = dst_turn(predicted, &gold);
        let mut m = BTreeMap::new();
        m.insert("jga".into(), f64::from(u8::from(joint)));
        m.insert("slot_accuracy".into(), if total == 0 { 1.0 } else { right as f64 / total as f64 });
        out.push(scored(m, &prompt));
    }
    out
}

fn default_metrics(template: &Template) -> Vec<String> {
    let names: &[&str] = match template.inline.as_ref().filter(|_| template.is_parsing()).map(|i| i.output()) {
        None => &["f1", "kf1", "bleu4", "rouge_l", "entity_f1"],
        Some(ParseOutput::TitleQuery) => &["rprec", "f1"],
        Some(ParseOutput::SearchQuery | ParseOutput::PersonaLine) => &["f1"],
        Some(ParseOutput::StateUpdate) => &["jga", "slot_accuracy"],
        Some(ParseOutput::GraphPath) => &["path", "tgt"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

/// Runs every `(shots, run)` combination of `config` against `data`.
///
/// With `progress` set, each finished example is appended to that JSONL
/// file, and examples already logged there are not evaluated again, so an
/// interrupted run can be resumed and yields the same report.
pub fn run_eval(
    config: &TaskConfig,
    data: &EvalData,
    registry: &TemplateRegistry,
    lm: &dyn LanguageModel,
    progress: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let template = registry.get(&config.task)?;
    let descriptor = lm.descriptor();
    let budget = descriptor
        .context_window
        .checked_sub(config.max_tokens)
        .filter(|b| *b > 0)
        .ok_or_else(|| EvalError::Config(format!("max_tokens {} leaves no room in the context window", config.max_tokens)))?;
    let metrics = if config.metrics.is_empty() {
        default_metrics(template)
    } else {
        config.metrics.clone()
    };
    let mut done = match progress {
        Some(p) => read_progress(p)?,
        None => HashMap::new(),
    };
    let log = ProgressLog::open(progress)?;
    let work = units(template, &data.test);
    let mut results = Vec::new();

    for &k in &config.shots {
        let mut runs = Vec::new();
        for run in 0..config.runs {
            let shots = sample_shots(&data.validation, k, config.seed, run as u64)?;
            let rendered_shots = shots
                .iter()
                .map(|d| render_shot(d, template, None))
                .collect::<Result<Vec<_>, _>>()?;
            let ctx = RunContext {
                template,
                config,
                data,
                lm,
                rendered_shots,
                budget,
                metrics: &metrics,
            };
            let key = |ex: &str| (config.task.clone(), k, run, ex.to_string());
            let pending: Vec<&Unit<'_>> = work
                .iter()
                .filter(|u| u.turns.iter().any(|&i| !done.contains_key(&key(&example_id(u.dialogue, i)))))
                .collect();
            let fresh = map_bounded(&pending, config.in_flight, |u| -> Result<Vec<ProgressRecord>, EvalError> {
                let outcomes = if template.is_parsing() && template.inline.as_ref().map(|i| i.output()) == Some(ParseOutput::StateUpdate) {
                    eval_state(&ctx, u.dialogue)
                } else if template.is_parsing() {
                    vec![eval_parse(&ctx, u.dialogue, u.turns[0])]
                } else {
                    vec![eval_generation(&ctx, u.dialogue, u.turns[0])]
                };
                let records: Vec<ProgressRecord> = u
                    .turns
                    .iter()
                    .zip(outcomes)
                    .map(|(&i, outcome)| ProgressRecord {
                        task: config.task.clone(),
                        shots: k,
                        run,
                        example: example_id(u.dialogue, i),
                        outcome,
                    })
                    .collect();
                log.append(&records)?;
                Ok(records)
            });
            for records in fresh {
                for r in records? {
                    done.insert(key_of(&r), r);
                }
            }
            runs.push(collect_run(run, &shots, &work, |ex| done.get(&key(ex))));
        }
        let mut names: Vec<String> = runs.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
        names.sort();
        names.dedup();
        let summaries = names
            .into_iter()
            .map(|n| {
                let values = runs.iter().filter_map(|r| r.metrics.get(&n).copied()).collect();
                (n, MetricSummary::from_runs(values))
            })
            .collect();
        results.push(ShotResult {
            shots: k,
            metrics: summaries,
            failed: runs.iter().map(|r| r.failed.len()).sum(),
            runs,
        });
    }
    Ok(EvalReport {
        task: config.task.clone(),
        backend: descriptor,
        seed: config.seed,
        max_tokens: config.max_tokens,
        budget,
        results,
    })
}

fn collect_run<'r>(run: usize, shots: &[Dialogue], work: &[Unit<'_>], lookup: impl Fn(&str) -> Option<&'r ProgressRecord>) -> RunResult {
    let mut examples = BTreeMap::new();
    let mut failed_ids = Vec::new();
    let mut entity_total: Option<EntityCounts> = None;
    let mut max_prompt_tokens = 0;
    for u in work {
        for &i in &u.turns {
            let id = example_id(u.dialogue, i);
            match lookup(&id).map(|r| &r.outcome) {
                Some(Outcome::Scored {
                    metrics,
                    entities,
                    prompt_tokens,
                    ..
                }) => {
                    max_prompt_tokens = max_prompt_tokens.max(*prompt_tokens);
                    if let Some(c) = entities {
                        entity_total.get_or_insert_with(EntityCounts::default).add(*c);
                    }
                    examples.insert(id, metrics.clone());
                }
                Some(Outcome::Failed { .. }) | None => failed_ids.push(id),
            }
        }
    }
    failed_ids.sort();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for m in examples.values() {
        for (name, v) in m {
            let e = sums.entry(name.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let mut metrics: BTreeMap<String, f64> = sums.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect();
    if let Some(c) = entity_total {
        metrics.insert("entity_f1".into(), c.f1());
    }
    RunResult {
        run,
        shot_ids: shots.iter().map(|d| d.id.clone()).collect(),
        metrics,
        scored: examples.len(),
        failed: failed_ids,
        max_prompt_tokens,
        examples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{EchoBackend, WhitespaceTokens};
    use crate::dialogue::Turn;

    fn pool(n: usize) -> Vec<Dialogue> {
        (0..n)
            .map(|i| Dialogue::new(format!("v{i}"), "dd", vec![Turn::user(format!("hi {i}")), Turn::assistant("yo")]))
            .collect()
    }

    #[test]
    fn shot_sampling() {
        let v = pool(9);
        assert!(sample_shots(&v, 0, 1, 0).unwrap().is_empty());
        assert_eq!(sample_shots(&v, 3, 1, 0).unwrap(), sample_shots(&v, 3, 1, 0).unwrap());
        let ids = |r| sample_shots(&v, 3, 42, r).unwrap().iter().map(|d| d.id.clone()).collect::<Vec<_>>();
        assert!(ids(0) != ids(1) && ids(1) != ids(2) && ids(0) != ids(2));
        assert!(sample_shots(&v, 10, 1, 0).is_err());
    }

    #[test]
    fn fit_keeps_latest_shots() {
        let shots = vec!["a b c".to_string(), "d e f".to_string(), "g h i".to_string()];
        let p = fit_shots(&shots, "q r", 8, &WhitespaceTokens).unwrap();
        assert_eq!(p.text, "d e f\n\ng h i");
        assert_eq!(p.shot_count, 2);
    }

    #[test]
    fn oracle_backend_scores_one() {
        let test = vec![Dialogue::new("t0", "dd", vec![Turn::user("hello there"), Turn::assistant("general kenobi")])];
        let data = EvalData {
            validation: pool(3),
            test,
            kg: None,
            entities: None,
        };
        let lm = EchoBackend::new().with_default(" general kenobi");
        let mut config = TaskConfig::new("dd", "", "");
        config.shots = vec![1];
        config.runs = 1;
        let report = run_eval(&config, &data, &TemplateRegistry::builtin(), &lm, None).unwrap();
        let r = &report.results[0];
        assert_eq!(r.metrics["f1"].mean, 1.0);
        assert_eq!(r.metrics["f1"].std, 0.0);
        assert_eq!(r.runs[0].scored, 1);
    }
}
