//! Conversational parsing: turning a dialogue history into a search query,
//! a Wikipedia title, a persona line, a dialogue-state update or a
//! knowledge-graph path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{perplexity, BackendError, GenerationRequest, LanguageModel};
use crate::dialogue::{apply_state_update, parse_state_string, Dialogue, DialogueState, GraphPath, ModelError, Triple};
use crate::fanout::map_bounded;
use crate::prompt::{render_query, ParseOutput, PromptText, RenderError, Template};
use crate::retrieval::KnowledgeGraph;

/// Emission meaning "nothing to look up".
pub const NONE_TOKEN: &str = "None";

/// Default number of ranked paths kept by [`constrained_kg_decode`].
pub const DEFAULT_PATH_CANDIDATES: usize = 25;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("template {0} is not a parsing template")]
    NotParsing(String),
    #[error("template {0} decodes graph paths; use constrained_kg_decode")]
    GraphTemplate(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("empty emission")]
    Empty,
    #[error("cannot parse {raw:?}: {source}")]
    Grammar {
        raw: String,
        #[source]
        source: ModelError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ParsedValue {
    TitleQuery(String),
    SearchQuery(String),
    PersonaLine(String),
    StateUpdate(DialogueState),
    GraphPath(GraphPath),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseResult {
    #[serde(flatten)]
    pub value: ParsedValue,
    /// The emission as generated, stop sequence removed.
    pub raw: String,
}

impl ParseResult {
    pub fn is_none(&self) -> bool {
        self.value == ParsedValue::None
    }

    /// The query, title or persona line, if this result carries text.
    pub fn text(&self) -> Option<&str> {
        match &self.value {
            ParsedValue::TitleQuery(s) | ParsedValue::SearchQuery(s) | ParsedValue::PersonaLine(s) => Some(s),
            _ => None,
        }
    }
}

fn interpret(output: ParseOutput, raw: String) -> Result<ParseResult, ParseError> {
    let text = raw.trim();
    if text == NONE_TOKEN {
        return Ok(ParseResult {
            value: ParsedValue::None,
            raw,
        });
    }
    let value = match output {
        ParseOutput::StateUpdate => ParsedValue::StateUpdate(parse_state_string(text).map_err(|source| ParseError::Grammar {
            raw: raw.clone(),
            source,
        })?),
        _ if text.is_empty() => return Err(ParseError::Empty),
        ParseOutput::TitleQuery => ParsedValue::TitleQuery(text.to_string()),
        ParseOutput::SearchQuery => ParsedValue::SearchQuery(text.to_string()),
        ParseOutput::PersonaLine => ParsedValue::PersonaLine(text.to_string()),
        ParseOutput::GraphPath => unreachable!("rejected by parse_dsl"),
    };
    Ok(ParseResult { value, raw })
}

fn output_of(template: &Template) -> Result<ParseOutput, ParseError> {
    match &template.inline {
        Some(inline) if template.is_parsing() => Ok(inline.output()),
        _ => Err(ParseError::NotParsing(template.id.clone())),
    }
}

/// Generates the parse for the last (user) turn of `history`.
///
/// The context is `prompt`, the shot separator, and `history` rendered up to
/// the template's inline label (`Search:`, `Write:`, `DST:`).
pub fn parse_dsl(history: &Dialogue, template: &Template, prompt: &PromptText, lm: &dyn LanguageModel) -> Result<ParseResult, ParseError> {
    let output = output_of(template)?;
    if output == ParseOutput::GraphPath {
        return Err(ParseError::GraphTemplate(template.id.clone()));
    }
    let context = prompt.followed_by(&render_query(history, template, None)?);
    let raw = lm.generate(&GenerationRequest::new(context))?;
    interpret(output, raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrack {
    /// Accumulated state after each user turn.
    pub states: Vec<DialogueState>,
    /// Parsed update per user turn.
    pub updates: Vec<DialogueState>,
    /// `(turn index, message)` for every emission that failed to parse.
    pub diagnostics: Vec<(usize, String)>,
}

/// Tracks dialogue state turn by turn. Earlier `DST:` lines in the context
/// are the model's own predictions; gold updates in `dialogue` are never
/// read. An unparseable emission counts as an empty update.
pub fn track_state(dialogue: &Dialogue, template: &Template, prompt: &PromptText, lm: &dyn LanguageModel) -> Result<StateTrack, ParseError> {
    if output_of(template)? != ParseOutput::StateUpdate {
        return Err(ParseError::NotParsing(template.id.clone()));
    }
    let mut working = dialogue.clone();
    for turn in &mut working.turns {
        turn.state_update = None;
    }
    let mut track = StateTrack {
        states: Vec::new(),
        updates: Vec::new(),
        diagnostics: Vec::new(),
    };
    let mut state = DialogueState::new();
    for i in 0..working.turns.len() {
        if !working.turns[i].is_user() {
            continue;
        }
        let update = match parse_dsl(&working.prefix(i + 1), template, prompt, lm) {
            Ok(ParseResult {
                value: ParsedValue::StateUpdate(u),
                ..
            }) => u,
            Ok(_) => DialogueState::new(),
            Err(e @ (ParseError::Grammar { .. } | ParseError::Empty)) => {
                track.diagnostics.push((i, e.to_string()));
                DialogueState::new()
            }
            Err(e) => return Err(e),
        };
        state = apply_state_update(&state, &update).expect("parsed updates have valid keys");
        working.turns[i].state_update = Some(update.clone());
        track.updates.push(update);
        track.states.push(state.clone());
    }
    Ok(track)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub relation: String,
    pub object: String,
    pub perplexity: f64,
}

/// One hop of constrained decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopTrace {
    pub subject: String,
    /// Relation as emitted by the model.
    pub emitted_relation: String,
    /// Whether the emitted relation matched no edge and every neighbor was
    /// considered instead.
    pub fell_back: bool,
    /// Candidates in adjacency order.
    pub candidates: Vec<CandidateScore>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPath {
    pub path: GraphPath,
    /// Summed log-probability of the serialized path after `KG:`.
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KgDecode {
    /// The greedy path first, then the other explored paths by log-probability.
    pub ranking: Vec<RankedPath>,
    pub hops: Vec<HopTrace>,
}

impl KgDecode {
    pub fn best(&self) -> Option<&GraphPath> {
        self.ranking.first().map(|r| &r.path)
    }

    pub fn paths(&self) -> Vec<GraphPath> {
        self.ranking.iter().map(|r| r.path.clone()).collect()
    }
}

/// Splits an emission into tab-separated fields, trimmed, empties dropped.
fn fields(text: &str) -> Vec<&str> {
    text.split('\t').map(str::trim).filter(|f| !f.is_empty()).collect()
}

fn candidate_edges<'a>(kg: &'a KnowledgeGraph, subject: &str, relation: &str) -> (Vec<&'a (String, String)>, bool) {
    let neighbors = kg.neighbors(subject);
    let exact: Vec<_> = neighbors.iter().filter(|(r, _)| r == relation).collect();
    if exact.is_empty() {
        (neighbors.iter().collect(), true)
    } else {
        (exact, false)
    }
}

/// Scores every candidate object after `prefix` and returns the index of the
/// lowest-perplexity one (first in adjacency order on ties).
fn choose(
    prefix: &str,
    edges: &[&(String, String)],
    lm: &dyn LanguageModel,
    in_flight: usize,
) -> Result<(Vec<CandidateScore>, usize), BackendError> {
    let scored = map_bounded(edges, in_flight, |(rel, obj)| {
        perplexity(lm, &format!("{prefix}{rel}\t"), obj)
    });
    let mut out = Vec::with_capacity(edges.len());
    for ((rel, obj), ppl) in edges.iter().map(|e| (&e.0, &e.1)).zip(scored) {
        out.push(CandidateScore {
            relation: rel.clone(),
            object: obj.clone(),
            perplexity: ppl?,
        });
    }
    let best = (0..out.len())
        .fold(0, |best, i| if out[i].perplexity < out[best].perplexity { i } else { best });
    Ok((out, best))
}

/// Decodes a knowledge-graph path for the last user turn of `history`.
///
/// Each hop the model writes `subject\trelation`; the graph supplies the
/// objects reachable over that relation (or over any edge when the relation
/// matches none), and the object with the lowest perplexity is appended.
/// If the model then continues with a tab, a second hop starts from that
/// object. Only graph edges ever enter a returned path.
pub fn constrained_kg_decode(
    history: &Dialogue,
    template: &Template,
    prompt: &PromptText,
    lm: &dyn LanguageModel,
    kg: &KnowledgeGraph,
    k: usize,
    in_flight: usize,
) -> Result<KgDecode, ParseError> {
    if output_of(template)? != ParseOutput::GraphPath {
        return Err(ParseError::NotParsing(template.id.clone()));
    }
    let base = prompt.followed_by(&render_query(history, template, None)?);
    let emission = lm.generate(&GenerationRequest::new(base.clone()))?;
    let first = fields(&emission);
    if first.len() < 2 || first[0] == NONE_TOKEN {
        return Ok(KgDecode::default());
    }
    let (subject, relation) = (first[0], first[1]);
    let (edges, fell_back) = candidate_edges(kg, subject, relation);
    if edges.is_empty() {
        return Ok(KgDecode::default());
    }
    let prefix = format!("{base} {subject}\t");
    let (candidates, chosen) = choose(&prefix, &edges, lm, in_flight)?;
    let hop1 = Triple::new(subject, &candidates[chosen].relation, &candidates[chosen].object);
    let mut hops = vec![HopTrace {
        subject: subject.to_string(),
        emitted_relation: relation.to_string(),
        fell_back,
        candidates: candidates.clone(),
        chosen,
    }];
    let mut explored: Vec<GraphPath> = candidates
        .iter()
        .map(|c| GraphPath::single(Triple::new(subject, &c.relation, &c.object)).expect("graph edges are valid triples"))
        .collect();
    let mut greedy = explored[chosen].clone();

    let after_object = format!("{prefix}{}\t{}", hop1.relation, hop1.object);
    let more = lm.generate(&GenerationRequest::new(after_object.clone()))?;
    if let Some(rest) = more.strip_prefix('\t') {
        let mut second = fields(rest);
        if second.first() == Some(&hop1.object.as_str()) && second.len() >= 2 {
            second.remove(0);
        }
        if let Some(&relation2) = second.first() {
            let (edges2, fell_back2) = candidate_edges(kg, &hop1.object, relation2);
            if !edges2.is_empty() {
                let (candidates2, chosen2) = choose(&format!("{after_object}\t"), &edges2, lm, in_flight)?;
                for c in &candidates2 {
                    let hop2 = Triple::new(&hop1.object, &c.relation, &c.object);
                    explored.push(GraphPath::new(vec![hop1.clone(), hop2]).expect("hops chain through the shared object"));
                }
                greedy = explored[explored.len() - candidates2.len() + chosen2].clone();
                hops.push(HopTrace {
                    subject: hop1.object.clone(),
                    emitted_relation: relation2.to_string(),
                    fell_back: fell_back2,
                    candidates: candidates2,
                    chosen: chosen2,
                });
            }
        }
    }

    let mut unique: Vec<GraphPath> = Vec::new();
    for p in explored {
        if p != greedy && !unique.contains(&p) {
            unique.push(p);
        }
    }
    let path_score = |p: &GraphPath| lm.score(&base, &format!(" {}", p.serialize())).map(|s| s.total());
    let scores = map_bounded(&unique, in_flight, path_score);
    let mut rest = Vec::with_capacity(unique.len());
    for (path, s) in unique.into_iter().zip(scores) {
        rest.push(RankedPath { path, logprob: s? });
    }
    rest.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    let mut ranking = vec![RankedPath {
        logprob: path_score(&greedy)?,
        path: greedy,
    }];
    ranking.extend(rest);
    ranking.truncate(k.max(1));
    Ok(KgDecode { ranking, hops })
}
