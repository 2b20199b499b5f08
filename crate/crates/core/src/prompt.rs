//! Template registry, shot rendering and k-shot prompt assembly.
//!
//! Rendering is a pure function of `(Dialogue, Template)`. A rendered shot is
//! a block of `\n`-separated lines that never contains the shot separator
//! `"\n\n"`, so an assembled prompt has exactly one separator per shot.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, TokenCounter};
use crate::dialogue::{Dialogue, GraphPath, KnowledgeItem, Turn, ASSISTANT, USER};

/// Separator placed between shots and before the query.
pub const SHOT_SEPARATOR: &str = "\n\n";

const DEFAULT_MANIFEST: &str = include_str!("../assets/templates.toml");

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("turn {turn}: missing {what} required by template {template}")]
    MissingKnowledge {
        template: String,
        turn: usize,
        what: &'static str,
    },
    #[error("missing {header:?} block required by template {template}")]
    MissingHeader { template: String, header: String },
    #[error("turn {turn} is not a generation point for template {template}")]
    BadTarget { template: String, turn: usize },
    #[error("dialogue has no user turn")]
    NoUserTurn,
    #[error("rendered shot for dialogue {0} contains a blank line")]
    BlankLine(String),
    #[error("template manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("query alone needs {tokens} tokens, over the budget of {budget}")]
    QueryOverBudget { tokens: usize, budget: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Generation,
    Parsing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Assistant,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderSource {
    UserPersona,
    AssistantPersona,
    KbRows,
    ImageCaption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderBlock {
    pub title: String,
    pub source: HeaderSource,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InlineSource {
    Knowledge,
    Path,
    Query,
    Persona,
    State,
}

impl InlineSource {
    fn describe(self) -> &'static str {
        match self {
            InlineSource::Knowledge => "knowledge text",
            InlineSource::Path => "graph path",
            InlineSource::Query => "query",
            InlineSource::Persona => "persona line",
            InlineSource::State => "state update",
        }
    }
}

/// What a parsing template's emission means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutput {
    TitleQuery,
    SearchQuery,
    PersonaLine,
    StateUpdate,
    GraphPath,
}

/// A line rendered right after each user turn (`KB:`, `KG:`, `Search:`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InlineLine {
    pub label: String,
    pub source: InlineSource,
    #[serde(default)]
    pub required: bool,
    /// Overrides the output kind implied by `source`.
    #[serde(default)]
    pub output: Option<ParseOutput>,
}

impl InlineLine {
    pub fn output(&self) -> ParseOutput {
        self.output.unwrap_or(match self.source {
            InlineSource::Knowledge | InlineSource::Query => ParseOutput::SearchQuery,
            InlineSource::Persona => ParseOutput::PersonaLine,
            InlineSource::State => ParseOutput::StateUpdate,
            InlineSource::Path => ParseOutput::GraphPath,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub kind: TemplateKind,
    #[serde(default)]
    pub target: Target,
    #[serde(default)]
    pub headers: Vec<HeaderBlock>,
    #[serde(default = "default_dialogue_header")]
    pub dialogue_header: String,
    pub user_label: String,
    pub assistant_label: String,
    /// Print a turn's style keyword as its speaker label.
    #[serde(default)]
    pub style_labels: bool,
    #[serde(default)]
    pub inline: Option<InlineLine>,
}

fn default_dialogue_header() -> String {
    "Dialogue:".to_string()
}

impl Template {
    pub fn is_parsing(&self) -> bool {
        self.kind == TemplateKind::Parsing
    }

    /// Printed label (without colon) for a turn.
    pub fn label_for(&self, turn: &Turn) -> String {
        if self.style_labels {
            if let Some(style) = turn.style() {
                return style.to_string();
            }
        }
        self.role_label(&turn.speaker).to_string()
    }

    fn role_label<'a>(&'a self, speaker: &'a str) -> &'a str {
        match speaker {
            USER => &self.user_label,
            ASSISTANT => &self.assistant_label,
            named => named,
        }
    }

    fn validate(&self) -> Result<(), RenderError> {
        if self.is_parsing() && self.inline.is_none() {
            return Err(RenderError::Manifest(format!("parsing template {} has no inline line", self.id)));
        }
        let labels = [&self.user_label, &self.assistant_label, &self.dialogue_header];
        if labels.iter().any(|l| l.trim().is_empty() || l.contains('\n')) {
            return Err(RenderError::Manifest(format!("template {} has an empty or multi-line label", self.id)));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct Manifest {
    template: Vec<Template>,
}

/// Templates keyed by id.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, Template>,
}

impl TemplateRegistry {
    /// Parses a TOML manifest with one `[[template]]` table per template.
    pub fn from_manifest(text: &str) -> Result<Self, RenderError> {
        let manifest: Manifest = toml::from_str(text).map_err(|e| RenderError::Manifest(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for t in manifest.template {
            t.validate()?;
            if templates.contains_key(&t.id) {
                return Err(RenderError::Manifest(format!("duplicate template id {}", t.id)));
            }
            templates.insert(t.id.clone(), t);
        }
        Ok(Self { templates })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RenderError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| RenderError::Manifest(e.to_string()))?;
        Self::from_manifest(&text)
    }

    /// The bundled manifest covering all fifteen dialogue tasks.
    pub fn builtin() -> Self {
        Self::from_manifest(DEFAULT_MANIFEST).expect("bundled manifest is valid")
    }

    pub fn get(&self, id: &str) -> Result<&Template, RenderError> {
        self.templates.get(id).ok_or_else(|| RenderError::UnknownTemplate(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }

    pub fn insert(&mut self, template: Template) -> Result<(), RenderError> {
        template.validate()?;
        self.templates.insert(template.id.clone(), template);
        Ok(())
    }
}

fn line(label: &str, value: &str) -> String {
    if value.is_empty() {
        format!("{label}:")
    } else {
        format!("{label}: {value}")
    }
}

fn knowledge_triples_as_path(items: &[KnowledgeItem]) -> Option<String> {
    let triples: Vec<_> = items
        .iter()
        .filter_map(|k| match k {
            KnowledgeItem::Triple { triple } => Some(crate::dialogue::Triple::from(triple.clone())),
            _ => None,
        })
        .collect();
    if triples.is_empty() {
        return None;
    }
    match GraphPath::new(triples.clone()) {
        Ok(path) => Some(path.serialize()),
        Err(_) => Some(
            triples
                .iter()
                .map(|t| format!("{}\t{}\t{}", t.subject, t.relation, t.object))
                .collect::<Vec<_>>()
                .join(" "),
        ),
    }
}

fn inline_value(source: InlineSource, turn: &Turn) -> Option<String> {
    match source {
        InlineSource::Knowledge => {
            let texts: Vec<&str> = turn
                .knowledge
                .iter()
                .filter_map(|k| match k {
                    KnowledgeItem::Text { text } => Some(text.as_str()),
                    _ => None,
                })
                .collect();
            (!texts.is_empty()).then(|| texts.join(" "))
        }
        InlineSource::Path => {
            knowledge_triples_as_path(&turn.knowledge).or_else(|| turn.gold_path.as_ref().map(GraphPath::serialize))
        }
        InlineSource::Query => turn.query.clone(),
        InlineSource::Persona => turn.knowledge.iter().find_map(|k| match k {
            KnowledgeItem::Persona { text } => Some(text.clone()),
            _ => None,
        }),
        InlineSource::State => turn.state_update.as_ref().map(|s| s.serialize()),
    }
}

fn header_lines(dialogue: &Dialogue, source: HeaderSource) -> Vec<String> {
    match source {
        HeaderSource::UserPersona => dialogue.personas_user.clone(),
        HeaderSource::AssistantPersona => dialogue.personas_assistant.clone(),
        HeaderSource::ImageCaption => dialogue.image_caption.iter().cloned().collect(),
        HeaderSource::KbRows => dialogue
            .kb
            .iter()
            .map(|k| match k {
                KnowledgeItem::TableRow { row } | KnowledgeItem::Triple { triple: row } => row.join(" "),
                KnowledgeItem::Text { text }
                | KnowledgeItem::Persona { text }
                | KnowledgeItem::Caption { text }
                | KnowledgeItem::Style { text } => text.clone(),
            })
            .collect(),
    }
}

struct RenderPlan<'a> {
    /// Number of turns rendered.
    turns: usize,
    /// User turn whose inline line is replaced by the generation point.
    skip_inline: Option<usize>,
    generation_label: Option<&'a str>,
    lenient: bool,
}

fn render(dialogue: &Dialogue, template: &Template, plan: RenderPlan<'_>) -> Result<String, RenderError> {
    let mut lines = Vec::new();
    for header in &template.headers {
        let items = header_lines(dialogue, header.source);
        if header.required && items.is_empty() && !plan.lenient {
            return Err(RenderError::MissingHeader {
                template: template.id.clone(),
                header: header.title.clone(),
            });
        }
        lines.push(header.title.clone());
        lines.extend(items);
    }
    lines.push(template.dialogue_header.clone());
    for (i, turn) in dialogue.turns[..plan.turns].iter().enumerate() {
        lines.push(line(&template.label_for(turn), &turn.text));
        let Some(inline) = &template.inline else { continue };
        if !turn.is_user() || plan.skip_inline == Some(i) {
            continue;
        }
        match inline_value(inline.source, turn) {
            Some(value) => lines.push(line(&inline.label, &value)),
            None if inline.required && !plan.lenient => {
                return Err(RenderError::MissingKnowledge {
                    template: template.id.clone(),
                    turn: i,
                    what: inline.source.describe(),
                })
            }
            None => {}
        }
    }
    if let Some(label) = plan.generation_label {
        lines.push(format!("{label}:"));
    }
    if lines.iter().any(|l| l.is_empty()) {
        return Err(RenderError::BlankLine(dialogue.id.clone()));
    }
    Ok(lines.join("\n"))
}

/// Renders a dialogue as a shot.
///
/// Without `upto_turn` the whole dialogue is rendered, target lines included.
/// With `upto_turn = i` the output stops at the generation point for turn `i`:
/// for generation templates the context before turn `i` followed by turn `i`'s
/// speaker label, for parsing templates the context through user turn `i`
/// followed by the inline label (`Search:`, `DST:`, ...).
pub fn render_shot(dialogue: &Dialogue, template: &Template, upto_turn: Option<usize>) -> Result<String, RenderError> {
    let Some(i) = upto_turn else {
        return render(
            dialogue,
            template,
            RenderPlan {
                turns: dialogue.turns.len(),
                skip_inline: None,
                generation_label: None,
                lenient: false,
            },
        );
    };
    let bad_target = || RenderError::BadTarget {
        template: template.id.clone(),
        turn: i,
    };
    let turn = dialogue.turns.get(i).ok_or_else(bad_target)?;
    match template.kind {
        TemplateKind::Parsing => {
            if !turn.is_user() {
                return Err(bad_target());
            }
            let label = &template.inline.as_ref().expect("validated").label;
            render(
                dialogue,
                template,
                RenderPlan {
                    turns: i + 1,
                    skip_inline: Some(i),
                    generation_label: Some(label),
                    lenient: false,
                },
            )
        }
        TemplateKind::Generation => {
            if template.target == Target::Assistant && turn.is_user() {
                return Err(bad_target());
            }
            let label = template.label_for(turn);
            render(
                dialogue,
                template,
                RenderPlan {
                    turns: i,
                    skip_inline: None,
                    generation_label: Some(&label),
                    lenient: false,
                },
            )
        }
    }
}

/// Label for the turn that would follow the dialogue under a generation
/// template. Human-to-human templates alternate speakers.
pub fn next_label(dialogue: &Dialogue, template: &Template) -> String {
    let turns = &dialogue.turns;
    match template.target {
        Target::Assistant => template.assistant_label.clone(),
        Target::Any if turns.len() >= 2 => template.label_for(&turns[turns.len() - 2]),
        Target::Any => match turns.last() {
            Some(t) if t.is_user() => template.assistant_label.clone(),
            _ => template.user_label.clone(),
        },
    }
}

fn render_next(dialogue: &Dialogue, template: &Template, label: Option<&str>, lenient: bool) -> Result<String, RenderError> {
    match template.kind {
        TemplateKind::Parsing => {
            let last = dialogue.turns.len().checked_sub(1).ok_or(RenderError::NoUserTurn)?;
            if !dialogue.turns[last].is_user() {
                return Err(RenderError::BadTarget {
                    template: template.id.clone(),
                    turn: last,
                });
            }
            let label = label.unwrap_or(&template.inline.as_ref().expect("validated").label);
            render(
                dialogue,
                template,
                RenderPlan {
                    turns: last + 1,
                    skip_inline: Some(last),
                    generation_label: Some(label),
                    lenient,
                },
            )
        }
        TemplateKind::Generation => {
            let label = label.map(str::to_string).unwrap_or_else(|| next_label(dialogue, template));
            render(
                dialogue,
                template,
                RenderPlan {
                    turns: dialogue.turns.len(),
                    skip_inline: None,
                    generation_label: Some(&label),
                    lenient,
                },
            )
        }
    }
}

/// Renders the whole dialogue as context and ends at the generation point of
/// the next output. `label` overrides the speaker label of that point, which
/// is how a style keyword becomes the reply's speaker.
pub fn render_query(dialogue: &Dialogue, template: &Template, label: Option<&str>) -> Result<String, RenderError> {
    render_next(dialogue, template, label, false)
}

/// Like [`render_query`], but turns lacking a knowledge annotation or an
/// empty header are rendered without it instead of failing. Used for live
/// conversations where earlier turns may have been handled by other skills.
pub fn render_query_lenient(dialogue: &Dialogue, template: &Template, label: Option<&str>) -> Result<String, RenderError> {
    render_next(dialogue, template, label, true)
}

/// Renders the dialogue block used by the skill selector: `User:`/`Assistant:`
/// lines only, ending with the final user utterance.
pub fn render_skill_history(dialogue: &Dialogue) -> Result<String, RenderError> {
    let last = dialogue.last_user_index().ok_or(RenderError::NoUserTurn)?;
    let mut out = String::from("Dialogue:");
    for turn in &dialogue.turns[..=last] {
        let label = if turn.is_user() { "User" } else { "Assistant" };
        out.push('\n');
        out.push_str(&line(label, &turn.text));
    }
    Ok(out)
}

/// A rendered prompt and its size under the tokenizer it was assembled with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub shot_count: usize,
    pub token_count: usize,
}

impl PromptText {
    pub fn empty() -> Self {
        Self {
            text: String::new(),
            shot_count: 0,
            token_count: 0,
        }
    }

    /// Appends a query after this prompt, separated by the shot separator.
    pub fn followed_by(&self, query: &str) -> String {
        if self.text.is_empty() {
            query.to_string()
        } else {
            format!("{}{SHOT_SEPARATOR}{query}", self.text)
        }
    }
}

/// Joins full renderings of `shots` into a prompt with no query attached.
pub fn build_shot_prompt(shots: &[Dialogue], template: &Template, counter: &dyn TokenCounter) -> Result<PromptText, PromptError> {
    let rendered = shots
        .iter()
        .map(|d| render_shot(d, template, None))
        .collect::<Result<Vec<_>, _>>()?;
    let text = rendered.join(SHOT_SEPARATOR);
    let token_count = counter.count_tokens(&text)?;
    Ok(PromptText {
        text,
        shot_count: shots.len(),
        token_count,
    })
}

/// Assembles `shots` followed by the rendered `query` within `token_budget`.
///
/// Shots are evicted from the front of the list until the prompt fits. The
/// query itself is never truncated.
pub fn assemble_prompt(
    shots: &[Dialogue],
    query: &str,
    template: &Template,
    token_budget: usize,
    counter: &dyn TokenCounter,
) -> Result<PromptText, PromptError> {
    let rendered = shots
        .iter()
        .map(|d| render_shot(d, template, None))
        .collect::<Result<Vec<_>, _>>()?;
    assemble_rendered(&rendered, query, token_budget, counter)
}

/// [`assemble_prompt`] over shots that are already rendered.
pub fn assemble_rendered(
    rendered: &[String],
    query: &str,
    token_budget: usize,
    counter: &dyn TokenCounter,
) -> Result<PromptText, PromptError> {
    let query_tokens = counter.count_tokens(query)?;
    if query_tokens > token_budget {
        return Err(PromptError::QueryOverBudget {
            tokens: query_tokens,
            budget: token_budget,
        });
    }
    for start in 0..=rendered.len() {
        let mut blocks: Vec<&str> = rendered[start..].iter().map(String::as_str).collect();
        blocks.push(query);
        let text = blocks.join(SHOT_SEPARATOR);
        let token_count = counter.count_tokens(&text)?;
        if token_count <= token_budget {
            return Ok(PromptText {
                text,
                shot_count: rendered.len() - start,
                token_count,
            });
        }
    }
    unreachable!("the query alone fits the budget")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::WhitespaceTokens;
    use crate::dialogue::{DialogueState, Turn};

    fn registry() -> TemplateRegistry {
        TemplateRegistry::builtin()
    }

    #[test]
    fn builtin_manifest_has_fifteen_templates() {
        assert_eq!(registry().ids().count(), 15);
    }

    #[test]
    fn dd_renders_without_headers() {
        let reg = registry();
        let d = Dialogue::new(
            "dd-1",
            "dd",
            vec![Turn::user("Hey"), Turn::assistant("Some what?"), Turn::user("Weed!"), Turn::assistant("no thanks")],
        );
        let text = render_shot(&d, reg.get("dd").unwrap(), Some(3)).unwrap();
        assert_eq!(text, "Dialogue:\nUserA: Hey\nUserB: Some what?\nUserA: Weed!\nUserB:");
        // any turn is a target in human-to-human data
        assert_eq!(render_shot(&d, reg.get("dd").unwrap(), Some(2)).unwrap(), "Dialogue:\nUserA: Hey\nUserB: Some what?\nUserA:");
    }

    #[test]
    fn missing_kb_names_the_turn() {
        let reg = registry();
        let d = Dialogue::new(
            "w",
            "wow",
            vec![
                Turn::user("a").with_knowledge(KnowledgeItem::text("k")),
                Turn::assistant("b"),
                Turn::user("c"),
                Turn::assistant("d"),
            ],
        );
        match render_shot(&d, reg.get("wow").unwrap(), Some(3)) {
            Err(RenderError::MissingKnowledge { turn: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let lenient = render_query_lenient(&d.prefix(3), reg.get("wow").unwrap(), None).unwrap();
        assert_eq!(lenient, "Dialogue:\nUser: a\nKB: k\nAssistant: b\nUser: c\nAssistant:");
    }

    #[test]
    fn generation_point_must_match_target() {
        let reg = registry();
        let d = Dialogue::new("p", "persona", vec![Turn::user("a"), Turn::assistant("b")]);
        assert!(matches!(render_shot(&d, reg.get("persona").unwrap(), Some(0)), Err(RenderError::BadTarget { turn: 0, .. })));
        assert!(matches!(render_shot(&d, reg.get("mwoz-dst").unwrap(), Some(1)), Err(RenderError::BadTarget { turn: 1, .. })));
        assert!(render_shot(&d, reg.get("persona").unwrap(), Some(7)).is_err());
    }

    #[test]
    fn dst_lines_interleave() {
        let reg = registry();
        let mut u1 = Turn::user("i need a 3 star hotel");
        u1.state_update = Some(DialogueState::from_pairs([("hotel-stars", "3")]).unwrap());
        let mut u2 = Turn::user("with wifi");
        u2.state_update = Some(DialogueState::new());
        let d = Dialogue::new("m", "mwoz", vec![u1, Turn::assistant("ok"), u2]);
        let t = reg.get("mwoz-dst").unwrap();
        assert_eq!(
            render_shot(&d, t, None).unwrap(),
            "Dialogue:\nUser: i need a 3 star hotel\nDST: hotel-stars=3\nAssistant: ok\nUser: with wifi\nDST:"
        );
        assert_eq!(
            render_shot(&d, t, Some(2)).unwrap(),
            "Dialogue:\nUser: i need a 3 star hotel\nDST: hotel-stars=3\nAssistant: ok\nUser: with wifi\nDST:"
        );
        assert_eq!(render_query(&d, t, None).unwrap(), render_shot(&d, t, Some(2)).unwrap());
    }

    #[test]
    fn style_overrides_final_label() {
        let reg = registry();
        let t = reg.get("cg-ic").unwrap();
        let d = Dialogue::new("c", "cg-ic", vec![Turn::assistant("What a sweet sky."), Turn::user("Beautiful day out in the cold")]);
        let kind = render_query(&d, t, Some("Kind")).unwrap();
        let sweet = render_query(&d, t, Some("Sweet")).unwrap();
        assert_eq!(kind, "Dialogue:\nSystem: What a sweet sky.\nUser: Beautiful day out in the cold\nKind:");
        assert_eq!(kind.rsplit_once('\n').unwrap().0, sweet.rsplit_once('\n').unwrap().0);
        assert_ne!(kind, sweet);
    }

    #[test]
    fn skill_history_cases() {
        let one = Dialogue::new("s", "x", vec![Turn::user("hi")]);
        assert_eq!(render_skill_history(&one).unwrap(), "Dialogue:\nUser: hi");
        let three = Dialogue::new("s", "x", vec![Turn::user("u1"), Turn::assistant("s1"), Turn::user("u2")]);
        assert_eq!(render_skill_history(&three).unwrap(), "Dialogue:\nUser: u1\nAssistant: s1\nUser: u2");
        let tail = Dialogue::new("s", "x", vec![Turn::user("u1"), Turn::assistant("s1"), Turn::user("u2"), Turn::assistant("s2")]);
        // oracle: truncate at the last user index, then render
        assert_eq!(render_skill_history(&tail).unwrap(), render_skill_history(&tail.prefix(3)).unwrap());
        assert!(matches!(render_skill_history(&Dialogue::new("e", "x", vec![])), Err(RenderError::NoUserTurn)));
    }

    fn dd(id: &str, words: usize) -> Dialogue {
        let text = vec!["w"; words].join(" ");
        Dialogue::new(id, "dd", vec![Turn::user(text.clone()), Turn::assistant(text)])
    }

    #[test]
    fn zero_shots_is_the_query() {
        let reg = registry();
        let p = assemble_prompt(&[], "Dialogue:\nUserA: hi\nUserB:", reg.get("dd").unwrap(), 100, &WhitespaceTokens).unwrap();
        assert_eq!(p.text, "Dialogue:\nUserA: hi\nUserB:");
        assert_eq!(p.shot_count, 0);
        assert_eq!(p.token_count, 4);
    }

    #[test]
    fn eviction_is_oldest_first() {
        let reg = registry();
        let t = reg.get("dd").unwrap();
        // each shot: "Dialogue:" + "UserA:" + 3w + "UserB:" + 3w = 9 tokens; query 3 tokens
        let shots = [dd("a", 3), dd("b", 3), dd("c", 3)];
        let query = "Dialogue:\nUserA: q";
        let fits = assemble_prompt(&shots[1..], query, t, 21, &WhitespaceTokens).unwrap();
        assert_eq!((fits.shot_count, fits.token_count), (2, 21));
        assert_eq!(fits.text.matches(SHOT_SEPARATOR).count(), 2);
        let evicted = assemble_prompt(&shots, query, t, 21, &WhitespaceTokens).unwrap();
        assert_eq!(evicted.shot_count, 2);
        assert_eq!(evicted, fits, "the first shot is the one dropped");
        match assemble_prompt(&shots, query, t, 2, &WhitespaceTokens) {
            Err(PromptError::QueryOverBudget { tokens: 3, budget: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_persona_line_is_rejected() {
        let reg = registry();
        let mut d = Dialogue::new("p", "persona", vec![Turn::user("a"), Turn::assistant("b")]);
        d.personas_assistant = vec!["i like cats".into(), String::new()];
        assert!(matches!(render_shot(&d, reg.get("persona").unwrap(), None), Err(RenderError::BlankLine(_))));
    }
}
