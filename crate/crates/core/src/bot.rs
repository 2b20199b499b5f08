//! The chatbot: per turn, pick a skill by prompt perplexity, run its parser
//! and retriever if it has one, then generate the reply with its prompt.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationRequest, LanguageModel};
use crate::dialogue::{read_dialogues, Dialogue, KnowledgeItem, Memory, Turn};
use crate::harness::fit_shots;
use crate::parsing::{constrained_kg_decode, parse_dsl, ParseError, ParseResult, ParsedValue, DEFAULT_PATH_CANDIDATES};
use crate::prompt::{render_query_lenient, render_shot, PromptError, PromptText, RenderError, Template, TemplateRegistry};
use crate::retrieval::{FixtureSearch, KnowledgeGraph, RetrievedKnowledge, SearchClient, WikiIndex};
use crate::selector::{select_skill, SelectionError, SkillPromptSet, SkillScore};

/// One shot per task; the default skill prompts.
pub const BUNDLED_SHOTS: &str = include_str!("../assets/shots.jsonl");

/// Reply used when the model produces nothing.
pub const FALLBACK_REPLY: &str = "Sorry, could you say that again?";

#[derive(Debug, Error)]
pub enum BotError {
    #[error("unknown skill {0}")]
    UnknownSkill(String),
    #[error("skill {0} is not available: {1}")]
    Unavailable(String, String),
    #[error("unknown style {style:?}; closest: {}", suggestions.join(", "))]
    UnknownStyle { style: String, suggestions: Vec<String> },
    #[error("loading {0}")]
    Load(String),
    #[error("empty user message")]
    EmptyMessage,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Parse(ParseError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// External knowledge a skill consults before replying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeNeed {
    None,
    Wiki,
    Search,
    Kg,
    Memory,
    Caption,
    Style,
}

#[derive(Debug, Clone)]
pub struct Skill {
    pub id: String,
    pub knowledge: KnowledgeNeed,
    pub parser: Option<String>,
    /// Whether the selector may pick this skill.
    pub selectable: bool,
    rendered_shots: Vec<String>,
}

impl Skill {
    pub fn shot_count(&self) -> usize {
        self.rendered_shots.len()
    }
}

/// Conversational skills in selector registration order.
const CATALOGUE: &[(&str, KnowledgeNeed, Option<&str>, bool)] = &[
    ("wow", KnowledgeNeed::Wiki, Some("wow-parse"), true),
    ("wit", KnowledgeNeed::Search, Some("wit-parse"), true),
    ("dialkg", KnowledgeNeed::Kg, Some("dialkg-parse"), true),
    ("persona", KnowledgeNeed::Memory, Some("msc-parse"), true),
    ("msc", KnowledgeNeed::Memory, Some("msc-parse"), true),
    ("ic", KnowledgeNeed::Caption, None, true),
    ("dd", KnowledgeNeed::None, None, true),
    ("ed", KnowledgeNeed::None, None, true),
    ("cg-ic", KnowledgeNeed::Style, None, false),
    ("wow-parse", KnowledgeNeed::None, None, false),
    ("wit-parse", KnowledgeNeed::None, None, false),
    ("msc-parse", KnowledgeNeed::None, None, false),
    ("dialkg-parse", KnowledgeNeed::None, None, false),
];

#[derive(Default, Clone)]
pub struct KnowledgeSources {
    pub wiki: Option<Arc<WikiIndex>>,
    pub search: Option<Arc<dyn SearchClient>>,
    pub kg: Option<Arc<KnowledgeGraph>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BotConfig {
    pub max_tokens: usize,
    pub stops: Vec<String>,
    /// Concurrent scoring calls during skill selection.
    pub in_flight: usize,
    /// The bot's own persona lines.
    pub persona: Vec<String>,
    /// Style keywords accepted by [`FewShotBot::styled_reply`].
    pub styles: Vec<String>,
}

impl Default for BotConfig {
    fn default() -> Self {
        Self {
            max_tokens: crate::backend::DEFAULT_MAX_TOKENS,
            stops: vec![crate::backend::DEFAULT_STOP.to_string()],
            in_flight: 4,
            persona: Vec::new(),
            styles: Vec::new(),
        }
    }
}

/// Everything the bot decided while producing one reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBundle {
    /// Index of the reply turn in the dialogue.
    pub turn: usize,
    pub response: String,
    pub selected_skill: String,
    /// Selector scores; empty when the skill was fixed by the caller.
    pub score_table: Vec<SkillScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieved: Option<RetrievedKnowledge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse: Option<ParseResult>,
    /// Persona lines added to memory this turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub memory_delta: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// A conversation's full state. It changes only when a step succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub dialogue: Dialogue,
    pub memory: Memory,
    #[serde(default)]
    pub transcript: Vec<ResponseBundle>,
}

impl Conversation {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            dialogue: Dialogue::new(id, "chat", Vec::new()),
            memory: Memory::default(),
            transcript: Vec::new(),
        }
    }

    pub fn with_caption(mut self, caption: impl Into<String>) -> Self {
        self.dialogue.image_caption = Some(caption.into());
        self
    }

    /// One JSON object per reply.
    pub fn transcript_jsonl(&self) -> String {
        self.transcript
            .iter()
            .map(|b| serde_json::to_string(b).expect("bundles serialize") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOptions {
    /// Skip selection and use this skill.
    #[serde(default)]
    pub skill: Option<String>,
    /// Speaker label for the reply (styled captioning).
    #[serde(default)]
    pub style: Option<String>,
}

impl From<ParseError> for BotError {
    fn from(e: ParseError) -> Self {
        match e {
            ParseError::Backend(b) => BotError::Backend(b),
            ParseError::Render(r) => BotError::Render(r),
            other => BotError::Parse(other),
        }
    }
}

/// Files a bot is built from. Unset entries fall back to the bundled
/// templates and shots, or leave that knowledge source out.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BotFiles {
    pub templates: Option<PathBuf>,
    pub shots: Option<PathBuf>,
    pub wiki: Option<PathBuf>,
    pub search: Option<PathBuf>,
    pub kg: Option<PathBuf>,
    /// Style keywords, one per line.
    pub styles: Option<PathBuf>,
}

impl BotFiles {
    /// Makes relative paths relative to `base`.
    pub fn relative_to(&self, base: &Path) -> Self {
        let fix = |p: &Option<PathBuf>| p.as_ref().map(|p| base.join(p));
        Self {
            templates: fix(&self.templates),
            shots: fix(&self.shots),
            wiki: fix(&self.wiki),
            search: fix(&self.search),
            kg: fix(&self.kg),
            styles: fix(&self.styles),
        }
    }

    pub fn build(&self, lm: Arc<dyn LanguageModel>, mut config: BotConfig) -> Result<FewShotBot, BotError> {
        let (registry, shots, knowledge) = self.load(&mut config)?;
        FewShotBot::new(lm, registry, &shots, knowledge, config)
    }

    /// Reads the files; the style list, if given, replaces `config.styles`.
    pub fn load(&self, config: &mut BotConfig) -> Result<(TemplateRegistry, Vec<Dialogue>, KnowledgeSources), BotError> {
        let load = |what: &Path, e: &dyn std::fmt::Display| BotError::Load(format!("{}: {e}", what.display()));
        let registry = match &self.templates {
            Some(p) => TemplateRegistry::load(p)?,
            None => TemplateRegistry::builtin(),
        };
        let shots = match &self.shots {
            Some(p) => crate::dialogue::load_dialogues(p).map_err(|e| load(p, &e))?,
            None => read_dialogues(BUNDLED_SHOTS.as_bytes()).expect("bundled shots are valid"),
        };
        let mut knowledge = KnowledgeSources::default();
        if let Some(p) = &self.wiki {
            knowledge.wiki = Some(Arc::new(WikiIndex::load(p).map_err(|e| load(p, &e))?));
        }
        if let Some(p) = &self.search {
            knowledge.search = Some(Arc::new(FixtureSearch::load(p).map_err(|e| load(p, &e))?));
        }
        if let Some(p) = &self.kg {
            knowledge.kg = Some(Arc::new(KnowledgeGraph::load(p).map_err(|e| load(p, &e))?));
        }
        if let Some(p) = &self.styles {
            let text = std::fs::read_to_string(p).map_err(|e| load(p, &e))?;
            config.styles = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect();
        }
        Ok((registry, shots, knowledge))
    }
}

pub struct FewShotBot {
    lm: Arc<dyn LanguageModel>,
    registry: TemplateRegistry,
    skills: Vec<Skill>,
    selector: SkillPromptSet,
    knowledge: KnowledgeSources,
    config: BotConfig,
}

impl FewShotBot {
    /// Builds the skills from `shots`, grouped by their `task` field. A skill
    /// whose template is missing from `registry` is left out; a skill without
    /// shots runs zero-shot.
    pub fn new(
        lm: Arc<dyn LanguageModel>,
        registry: TemplateRegistry,
        shots: &[Dialogue],
        knowledge: KnowledgeSources,
        config: BotConfig,
    ) -> Result<Self, BotError> {
        let mut skills = Vec::new();
        let mut selector_shots = Vec::new();
        for &(id, need, parser, selectable) in CATALOGUE {
            let Ok(template) = registry.get(id) else { continue };
            let own: Vec<Dialogue> = shots.iter().filter(|d| d.task == id).cloned().collect();
            let rendered_shots = own
                .iter()
                .map(|d| render_shot(d, template, None))
                .collect::<Result<Vec<_>, _>>()?;
            let skill = Skill {
                id: id.to_string(),
                knowledge: need,
                parser: parser.map(str::to_string),
                selectable,
                rendered_shots,
            };
            if selectable && availability(&skill, &knowledge).is_ok() {
                selector_shots.push((id.to_string(), own));
            }
            skills.push(skill);
        }
        let selector = SkillPromptSet::from_shots(&selector_shots, lm.as_ref())?;
        Ok(Self {
            lm,
            registry,
            skills,
            selector,
            knowledge,
            config,
        })
    }

    /// Drops a skill. It leaves selection; other skills are unaffected.
    pub fn remove_skill(&mut self, id: &str) -> Result<Skill, BotError> {
        let i = self
            .skills
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| BotError::UnknownSkill(id.to_string()))?;
        self.selector.remove(id);
        Ok(self.skills.remove(i))
    }

    pub fn skills(&self) -> &[Skill] {
        &self.skills
    }

    pub fn config(&self) -> &BotConfig {
        &self.config
    }

    pub fn skill(&self, id: &str) -> Result<&Skill, BotError> {
        self.skills.iter().find(|s| s.id == id).ok_or_else(|| BotError::UnknownSkill(id.to_string()))
    }

    /// Selector candidates for a conversation.
    pub fn candidates(&self, conversation: &Conversation) -> SkillPromptSet {
        let has_caption = conversation.dialogue.image_caption.is_some();
        self.selector.filtered(|id| {
            let need = self.skill(id).map(|s| s.knowledge).unwrap_or(KnowledgeNeed::None);
            need != KnowledgeNeed::Caption || has_caption
        })
    }

    /// Adds a user message and the bot's reply to `conversation`. On error
    /// the conversation is left untouched.
    pub fn step(&self, conversation: &mut Conversation, user_text: &str, options: &StepOptions) -> Result<ResponseBundle, BotError> {
        let mut next = conversation.clone();
        let bundle = self.step_inner(&mut next, user_text, options)?;
        next.transcript.push(bundle.clone());
        *conversation = next;
        Ok(bundle)
    }

    /// Replies under a style keyword, using the styled captioning skill.
    pub fn styled_reply(&self, conversation: &mut Conversation, user_text: &str, style: &str) -> Result<ResponseBundle, BotError> {
        self.check_style(style)?;
        let skill = if conversation.dialogue.image_caption.is_some() { "ic" } else { "cg-ic" };
        let options = StepOptions {
            skill: Some(skill.to_string()),
            style: Some(style.to_string()),
        };
        self.step(conversation, user_text, &options)
    }

    pub fn check_style(&self, style: &str) -> Result<(), BotError> {
        if self.config.styles.iter().any(|s| s == style) {
            return Ok(());
        }
        let mut ranked: Vec<(f64, &String)> = self
            .config
            .styles
            .iter()
            .map(|s| (strsim::normalized_levenshtein(&s.to_lowercase(), &style.to_lowercase()), s))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Err(BotError::UnknownStyle {
            style: style.to_string(),
            suggestions: ranked.into_iter().take(3).map(|(_, s)| s.clone()).collect(),
        })
    }

    fn step_inner(&self, conv: &mut Conversation, user_text: &str, options: &StepOptions) -> Result<ResponseBundle, BotError> {
        let user_text = user_text.split_whitespace().collect::<Vec<_>>().join(" ");
        if user_text.is_empty() {
            return Err(BotError::EmptyMessage);
        }
        if let Some(style) = &options.style {
            self.check_style(style)?;
        }
        conv.dialogue.personas_user = conv.memory.user_persona.clone();
        conv.dialogue.personas_assistant = self.config.persona.clone();
        conv.dialogue.turns.push(Turn::user(user_text));

        let (skill_id, score_table) = match &options.skill {
            Some(id) => (id.clone(), Vec::new()),
            None => {
                let selection = select_skill(&conv.dialogue, &self.candidates(conv), self.lm.as_ref(), self.config.in_flight)?;
                (selection.skill, selection.scores)
            }
        };
        let skill = self.skill(&skill_id)?;
        if !skill.selectable && skill.knowledge != KnowledgeNeed::Style {
            return Err(BotError::Unavailable(skill_id, "parsers do not reply".into()));
        }
        availability(skill, &self.knowledge).map_err(|why| BotError::Unavailable(skill_id.clone(), why))?;
        if skill.knowledge == KnowledgeNeed::Caption && conv.dialogue.image_caption.is_none() {
            return Err(BotError::Unavailable(skill_id, "no image caption".into()));
        }

        let mut bundle = ResponseBundle {
            turn: conv.dialogue.turns.len(),
            response: String::new(),
            selected_skill: skill_id.clone(),
            score_table,
            retrieved: None,
            parse: None,
            memory_delta: Vec::new(),
            diagnostics: Vec::new(),
        };
        self.gather_knowledge(skill, conv, &mut bundle)?;
        if let Some(k) = &bundle.retrieved {
            let items = k.items();
            conv.memory.last_knowledge = items.clone();
            conv.dialogue.turns.last_mut().expect("user turn pushed").knowledge.extend(items);
        }
        conv.dialogue.personas_user = conv.memory.user_persona.clone();

        let template = self.registry.get(&skill.id)?;
        let reply = self.generate(skill, template, &conv.dialogue, options.style.as_deref())?;
        bundle.response = if reply.is_empty() {
            bundle.diagnostics.push("empty generation; used the fallback reply".into());
            FALLBACK_REPLY.to_string()
        } else {
            reply
        };
        let mut turn = Turn::assistant(bundle.response.clone());
        if let Some(style) = &options.style {
            turn = turn.with_knowledge(KnowledgeItem::style(style.clone()));
        }
        conv.dialogue.turns.push(turn);
        Ok(bundle)
    }

    fn skill_prompt(&self, skill: &Skill, query: &str) -> Result<PromptText, BotError> {
        let budget = self.lm.descriptor().context_window.saturating_sub(self.config.max_tokens);
        Ok(fit_shots(&skill.rendered_shots, query, budget, self.lm.as_ref())?)
    }

    /// Renders the query, dropping the oldest turns while it does not fit.
    fn fitted_query(&self, dialogue: &Dialogue, template: &Template, label: Option<&str>) -> Result<String, BotError> {
        let budget = self.lm.descriptor().context_window.saturating_sub(self.config.max_tokens);
        let mut window = dialogue.clone();
        loop {
            let query = render_query_lenient(&window, template, label)?;
            let tokens = self.lm.count_tokens(&query)?;
            if tokens <= budget || window.turns.len() <= 1 {
                return Ok(query);
            }
            window.turns.remove(0);
        }
    }

    fn parse(&self, parser: &str, dialogue: &Dialogue) -> Result<ParseResult, BotError> {
        let skill = self.skill(parser)?;
        let template = self.registry.get(parser)?;
        let query = self.fitted_query(dialogue, template, None)?;
        let prompt = self.skill_prompt(skill, &query)?;
        let history = trim_to(dialogue, &query, template)?;
        Ok(parse_dsl(&history, template, &prompt, self.lm.as_ref())?)
    }

    fn gather_knowledge(&self, skill: &Skill, conv: &mut Conversation, bundle: &mut ResponseBundle) -> Result<(), BotError> {
        let Some(parser) = &skill.parser else { return Ok(()) };
        if skill.knowledge == KnowledgeNeed::Kg {
            let kg = self.knowledge.kg.as_ref().expect("checked by availability");
            let template = self.registry.get(parser)?;
            let query = self.fitted_query(&conv.dialogue, template, None)?;
            let prompt = self.skill_prompt(self.skill(parser)?, &query)?;
            let history = trim_to(&conv.dialogue, &query, template)?;
            let decoded = constrained_kg_decode(&history, template, &prompt, self.lm.as_ref(), kg, DEFAULT_PATH_CANDIDATES, self.config.in_flight)?;
            match decoded.best() {
                Some(path) => {
                    bundle.parse = Some(ParseResult {
                        raw: path.serialize(),
                        value: ParsedValue::GraphPath(path.clone()),
                    });
                    bundle.retrieved = Some(RetrievedKnowledge::from_path(path.clone()));
                }
                None => bundle.diagnostics.push("no graph path found".into()),
            }
            return Ok(());
        }
        let parsed = match self.parse(parser, &conv.dialogue) {
            Ok(p) => p,
            Err(BotError::Parse(e @ (ParseError::Empty | ParseError::Grammar { .. }))) => {
                bundle.diagnostics.push(format!("{parser}: {e}"));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let query = match (&parsed.value, skill.knowledge) {
            (ParsedValue::None, KnowledgeNeed::Search) => conv.memory.last_query.clone(),
            (ParsedValue::None, _) => None,
            (_, _) => parsed.text().map(str::to_string),
        };
        bundle.parse = Some(parsed);
        let Some(query) = query else { return Ok(()) };
        let retrieved = match skill.knowledge {
            KnowledgeNeed::Wiki => self.knowledge.wiki.as_ref().expect("checked").first_sentence(&query),
            KnowledgeNeed::Search => {
                conv.memory.last_query = Some(query.clone());
                self.knowledge.search.as_ref().expect("checked").search(&query)
            }
            KnowledgeNeed::Memory => {
                if conv.memory.remember_user_persona(&query) {
                    bundle.memory_delta.push(query);
                }
                return Ok(());
            }
            _ => return Ok(()),
        };
        match retrieved {
            Ok(k) => bundle.retrieved = Some(k),
            Err(e) => bundle.diagnostics.push(format!("retrieval: {e}")),
        }
        Ok(())
    }

    fn generate(&self, skill: &Skill, template: &Template, dialogue: &Dialogue, style: Option<&str>) -> Result<String, BotError> {
        let query = self.fitted_query(dialogue, template, style)?;
        let prompt = self.skill_prompt(skill, &query)?;
        let req = GenerationRequest::new(prompt.followed_by(&query))
            .with_max_tokens(self.config.max_tokens)
            .with_stops(self.config.stops.clone());
        Ok(self.lm.generate(&req)?.trim().to_string())
    }
}

/// The dialogue suffix whose rendering produced `query`.
fn trim_to(dialogue: &Dialogue, query: &str, template: &Template) -> Result<Dialogue, BotError> {
    let mut window = dialogue.clone();
    while window.turns.len() > 1 && render_query_lenient(&window, template, None)? != query {
        window.turns.remove(0);
    }
    Ok(window)
}

fn availability(skill: &Skill, knowledge: &KnowledgeSources) -> Result<(), String> {
    let missing = match skill.knowledge {
        KnowledgeNeed::Wiki if knowledge.wiki.is_none() => "no wiki index",
        KnowledgeNeed::Search if knowledge.search.is_none() => "no search client",
        KnowledgeNeed::Kg if knowledge.kg.is_none() => "no knowledge graph",
        _ => return Ok(()),
    };
    Err(missing.to_string())
}
