//! Domain types shared across the framework: turns, dialogues, knowledge
//! annotations, dialogue states and knowledge-graph paths.
//!
//! Everything here is a plain value. The only behavior is construction,
//! validation and (de)serialization, including the two textual grammars the
//! language model emits: dialogue-state updates (`domain-slot=value, ...`)
//! and tab-separated graph paths.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speaker label used for the human side of a conversation.
pub const USER: &str = "user";
/// Speaker label used for the bot side of a conversation.
pub const ASSISTANT: &str = "assistant";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state entry without '=': {0:?}")]
    MalformedEntry(String),
    #[error("state key {0:?} does not match <domain>-<slot>")]
    BadKey(String),
    #[error("graph path has {0} fields, expected 3 or 5")]
    PathFieldCount(usize),
    #[error("graph path hop {hop} starts at {subject:?} but the previous hop ends at {previous:?}")]
    BrokenChain {
        hop: usize,
        subject: String,
        previous: String,
    },
    #[error("graph path must have 1 or 2 hops, got {0}")]
    HopCount(usize),
    #[error("triple field is empty or contains a tab: {0:?}")]
    BadTripleField(String),
    #[error("dialogue {dialogue}: turn {turn}: {reason}")]
    InvalidTurn {
        dialogue: String,
        turn: usize,
        reason: String,
    },
    #[error("dialogue {0}: {1}")]
    InvalidDialogue(String, String),
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

/// One knowledge annotation. Triples and table rows serialize as
/// three-element string arrays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnowledgeItem {
    Text { text: String },
    Persona { text: String },
    Triple { triple: [String; 3] },
    TableRow { row: [String; 3] },
    Caption { text: String },
    Style { text: String },
}

impl KnowledgeItem {
    pub fn text(text: impl Into<String>) -> Self {
        KnowledgeItem::Text { text: text.into() }
    }

    pub fn persona(text: impl Into<String>) -> Self {
        KnowledgeItem::Persona { text: text.into() }
    }

    pub fn style(text: impl Into<String>) -> Self {
        KnowledgeItem::Style { text: text.into() }
    }

    fn validate(&self) -> Result<(), String> {
        let single_line = |s: &str| !s.contains('\n') && !s.contains('\r');
        match self {
            KnowledgeItem::Text { text }
            | KnowledgeItem::Persona { text }
            | KnowledgeItem::Caption { text }
            | KnowledgeItem::Style { text } => {
                if !single_line(text) {
                    return Err("knowledge text contains a newline".into());
                }
            }
            KnowledgeItem::Triple { triple } => {
                for field in triple {
                    if field.trim().is_empty() || field.contains('\t') || !single_line(field) {
                        return Err(format!("bad triple field {field:?}"));
                    }
                }
            }
            KnowledgeItem::TableRow { row } => {
                if row.iter().any(|f| !single_line(f)) {
                    return Err("table row contains a newline".into());
                }
            }
        }
        Ok(())
    }
}

/// Accumulated `domain-slot -> value` assignments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueState {
    entries: BTreeMap<String, String>,
}

impl DialogueState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a state from `(key, value)` pairs, validating every key.
    pub fn from_pairs<K, V, I>(pairs: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut state = Self::new();
        for (k, v) in pairs {
            state.insert(k, v)?;
        }
        Ok(state)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<(), ModelError> {
        let key = key.into();
        validate_state_key(&key)?;
        self.entries.insert(key, value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.entries.keys().try_for_each(|k| validate_state_key(k))
    }

    /// Serializes as `key=value` entries joined by `", "`, keys sorted.
    pub fn serialize(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

fn validate_state_key(key: &str) -> Result<(), ModelError> {
    match key.split_once('-') {
        Some((domain, slot)) if is_identifier(domain) && is_identifier(slot) => Ok(()),
        _ => Err(ModelError::BadKey(key.to_string())),
    }
}

/// Returns `state` with every entry of `update` inserted, later keys winning.
pub fn apply_state_update(state: &DialogueState, update: &DialogueState) -> Result<DialogueState, ModelError> {
    update.validate()?;
    let mut next = state.clone();
    for (k, v) in &update.entries {
        next.entries.insert(k.clone(), v.clone());
    }
    Ok(next)
}

/// Parses a raw DST emission such as `hotel-stars=3, hotel-internet=yes`.
pub fn parse_state_string(text: &str) -> Result<DialogueState, ModelError> {
    let text = text.trim();
    let mut state = DialogueState::new();
    if text.is_empty() {
        return Ok(state);
    }
    for entry in text.split(", ") {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| ModelError::MalformedEntry(entry.to_string()))?;
        state.insert(key.trim(), value.trim())?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[String; 3]", from = "[String; 3]")]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

impl From<[String; 3]> for Triple {
    fn from([subject, relation, object]: [String; 3]) -> Self {
        Self { subject, relation, object }
    }
}

impl From<Triple> for [String; 3] {
    fn from(t: Triple) -> Self {
        [t.subject, t.relation, t.object]
    }
}

/// A one- or two-hop path through the knowledge graph.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Triple>", into = "Vec<Triple>")]
pub struct GraphPath {
    hops: Vec<Triple>,
}

impl GraphPath {
    pub fn new(hops: Vec<Triple>) -> Result<Self, ModelError> {
        if hops.is_empty() || hops.len() > 2 {
            return Err(ModelError::HopCount(hops.len()));
        }
        for t in &hops {
            for field in [&t.subject, &t.relation, &t.object] {
                if field.trim().is_empty() || field.contains('\t') || field.contains('\n') {
                    return Err(ModelError::BadTripleField(field.clone()));
                }
            }
        }
        for (i, pair) in hops.windows(2).enumerate() {
            if pair[1].subject != pair[0].object {
                return Err(ModelError::BrokenChain {
                    hop: i + 1,
                    subject: pair[1].subject.clone(),
                    previous: pair[0].object.clone(),
                });
            }
        }
        Ok(Self { hops })
    }

    pub fn single(triple: Triple) -> Result<Self, ModelError> {
        Self::new(vec![triple])
    }

    pub fn hops(&self) -> &[Triple] {
        &self.hops
    }

    pub fn target(&self) -> &str {
        &self.hops[self.hops.len() - 1].object
    }

    /// Tab-separated form; the shared node of a two-hop path appears once.
    pub fn serialize(&self) -> String {
        let first = &self.hops[0];
        let mut fields = vec![first.subject.as_str(), first.relation.as_str(), first.object.as_str()];
        for hop in &self.hops[1..] {
            fields.push(&hop.relation);
            fields.push(&hop.object);
        }
        fields.join("\t")
    }
}

impl TryFrom<Vec<Triple>> for GraphPath {
    type Error = ModelError;
    fn try_from(hops: Vec<Triple>) -> Result<Self, Self::Error> {
        GraphPath::new(hops)
    }
}

impl From<GraphPath> for Vec<Triple> {
    fn from(p: GraphPath) -> Self {
        p.hops
    }
}

impl fmt::Display for GraphPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Parses `subject\trelation\tobject` (one hop) or the five-field two-hop form.
pub fn parse_path_string(text: &str) -> Result<GraphPath, ModelError> {
    let fields: Vec<&str> = text.trim_matches(|c| c == '\n' || c == ' ').split('\t').map(str::trim).collect();
    match fields.len() {
        3 => GraphPath::single(Triple::new(fields[0], fields[1], fields[2])),
        5 => GraphPath::new(vec![
            Triple::new(fields[0], fields[1], fields[2]),
            Triple::new(fields[2], fields[3], fields[4]),
        ]),
        n => Err(ModelError::PathFieldCount(n)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge: Vec<KnowledgeItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_update: Option<DialogueState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_path: Option<GraphPath>,
}

impl Turn {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            text: text.into(),
            knowledge: Vec::new(),
            state_update: None,
            query: None,
            gold_path: None,
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(USER, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::new(ASSISTANT, text)
    }

    pub fn with_knowledge(mut self, item: KnowledgeItem) -> Self {
        self.knowledge.push(item);
        self
    }

    pub fn is_user(&self) -> bool {
        self.speaker == USER
    }

    /// The style keyword attached to this turn, if any.
    pub fn style(&self) -> Option<&str> {
        self.knowledge.iter().find_map(|k| match k {
            KnowledgeItem::Style { text } => Some(text.as_str()),
            _ => None,
        })
    }

    fn validate(&self) -> Result<(), String> {
        if self.speaker.trim().is_empty() {
            return Err("empty speaker label".into());
        }
        if self.text.contains('\n') || self.text.contains('\r') {
            return Err("turn text contains a newline".into());
        }
        for k in &self.knowledge {
            k.validate()?;
        }
        if let Some(state) = &self.state_update {
            state.validate().map_err(|e| e.to_string())?;
        }
        if self.query.as_deref().is_some_and(|q| q.contains('\n')) {
            return Err("query contains a newline".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub task: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub personas_user: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub personas_assistant: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kb: Vec<KnowledgeItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_caption: Option<String>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, task: impl Into<String>, turns: Vec<Turn>) -> Self {
        Self {
            id: id.into(),
            task: task.into(),
            turns,
            personas_user: Vec::new(),
            personas_assistant: Vec::new(),
            kb: Vec::new(),
            image_caption: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (i, turn) in self.turns.iter().enumerate() {
            turn.validate().map_err(|reason| ModelError::InvalidTurn {
                dialogue: self.id.clone(),
                turn: i,
                reason,
            })?;
        }
        let lines = self.personas_user.iter().chain(&self.personas_assistant).chain(&self.image_caption);
        if lines.into_iter().any(|l| l.contains('\n')) {
            return Err(ModelError::InvalidDialogue(self.id.clone(), "persona or caption contains a newline".into()));
        }
        for k in &self.kb {
            k.validate().map_err(|r| ModelError::InvalidDialogue(self.id.clone(), r))?;
        }
        Ok(())
    }

    /// Index of the last user turn.
    pub fn last_user_index(&self) -> Option<usize> {
        self.turns.iter().rposition(Turn::is_user)
    }

    /// A copy holding only the first `len` turns.
    pub fn prefix(&self, len: usize) -> Dialogue {
        Dialogue {
            turns: self.turns[..len.min(self.turns.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// Reads a JSON Lines file of dialogues, validating each one.
pub fn load_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>, ModelError> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| ModelError::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_dialogues(std::io::BufReader::new(file))
}

pub fn read_dialogues(reader: impl BufRead) -> Result<Vec<Dialogue>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ModelError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let dialogue: Dialogue = serde_json::from_str(&line).map_err(|e| ModelError::Jsonl {
            line: i + 1,
            message: e.to_string(),
        })?;
        dialogue.validate()?;
        out.push(dialogue);
    }
    Ok(out)
}

pub fn write_dialogues(dialogues: &[Dialogue]) -> String {
    dialogues
        .iter()
        .map(|d| serde_json::to_string(d).expect("dialogue serializes") + "\n")
        .collect()
}

/// Per-session discrete memory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Memory {
    #[serde(default)]
    pub user_persona: Vec<String>,
    #[serde(default)]
    pub assistant_persona: Vec<String>,
    #[serde(default)]
    pub last_knowledge: Vec<KnowledgeItem>,
    #[serde(default)]
    pub last_query: Option<String>,
}

impl Memory {
    /// Appends a user persona line unless it is already stored. Returns
    /// whether the line was added.
    pub fn remember_user_persona(&mut self, line: &str) -> bool {
        if self.user_persona.iter().any(|l| l == line) {
            return false;
        }
        self.user_persona.push(line.to_string());
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(pairs: &[(&str, &str)]) -> DialogueState {
        DialogueState::from_pairs(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn update_inserts_and_overwrites() {
        let empty = DialogueState::new();
        let s = apply_state_update(&empty, &state(&[("hotel-stars", "3")])).unwrap();
        assert_eq!(s, state(&[("hotel-stars", "3")]));
        assert_eq!(apply_state_update(&s, &empty).unwrap(), s);
        let next = apply_state_update(&s, &state(&[("hotel-stars", "4"), ("hotel-internet", "yes")])).unwrap();
        assert_eq!(next, state(&[("hotel-stars", "4"), ("hotel-internet", "yes")]));
        // input untouched
        assert_eq!(s.get("hotel-stars"), Some("3"));
    }

    #[test]
    fn bad_keys_are_named() {
        assert_eq!(DialogueState::from_pairs([("Hotel-stars", "3")]), Err(ModelError::BadKey("Hotel-stars".into())));
        assert!(parse_state_string("hotelstars=3").is_err());
        assert_eq!(parse_state_string("hotel-stars 3"), Err(ModelError::MalformedEntry("hotel-stars 3".into())));
    }

    #[test]
    fn parses_state_emissions() {
        assert_eq!(parse_state_string("hotel-stars=3").unwrap(), state(&[("hotel-stars", "3")]));
        assert_eq!(parse_state_string("").unwrap(), DialogueState::new());
        assert_eq!(parse_state_string("   ").unwrap(), DialogueState::new());
        let two = parse_state_string(" hotel-stars=3, hotel-internet=yes").unwrap();
        assert_eq!(two, state(&[("hotel-stars", "3"), ("hotel-internet", "yes")]));
        let spaced = parse_state_string("restaurant-name=pizza hut city").unwrap();
        assert_eq!(spaced.get("restaurant-name"), Some("pizza hut city"));
    }

    #[test]
    fn parses_paths() {
        let p = parse_path_string("Anita Diamant\t~written_by\tThe Red Tent").unwrap();
        assert_eq!(p.hops(), &[Triple::new("Anita Diamant", "~written_by", "The Red Tent")]);
        let two = parse_path_string("A\tr1\tB\tr2\tC").unwrap();
        assert_eq!(two.hops(), &[Triple::new("A", "r1", "B"), Triple::new("B", "r2", "C")]);
        assert_eq!(two.target(), "C");
        assert_eq!(parse_path_string("A\tr1"), Err(ModelError::PathFieldCount(2)));
        assert_eq!(parse_path_string("A\tr1\tB\tr2"), Err(ModelError::PathFieldCount(4)));
        assert!(parse_path_string("A\t\tB").is_err());
    }

    #[test]
    fn path_invariants() {
        let broken = GraphPath::new(vec![Triple::new("A", "r", "B"), Triple::new("C", "r", "D")]);
        assert!(matches!(broken, Err(ModelError::BrokenChain { hop: 1, .. })));
        let three = vec![Triple::new("A", "r", "B"), Triple::new("B", "r", "C"), Triple::new("C", "r", "D")];
        assert_eq!(GraphPath::new(three), Err(ModelError::HopCount(3)));
        assert_eq!(GraphPath::new(vec![]), Err(ModelError::HopCount(0)));
    }

    #[test]
    fn turn_text_with_newline_is_rejected_on_load() {
        let line = r#"{"id":"d1","task":"dd","turns":[{"speaker":"user","text":"a\nb"}]}"#;
        let err = read_dialogues(line.as_bytes()).unwrap_err();
        assert!(matches!(err, ModelError::InvalidTurn { turn: 0, .. }));
        let line = r#"{"id":"d1","task":"dd","turns":[{"speaker":"","text":"hi"}]}"#;
        assert!(read_dialogues(line.as_bytes()).is_err());
    }

    #[test]
    fn dialogue_jsonl_shape() {
        let line = r#"{"id":"k1","task":"dialkg","turns":[{"speaker":"user","text":"hi","knowledge":[{"kind":"triple","triple":["A","r","B"]}],"gold_path":[["A","r","B"]],"state_update":{"hotel-stars":"3"}}],"kb":[{"kind":"table_row","row":["chevron","distance","5_miles"]}]}"#;
        let dialogues = read_dialogues(line.as_bytes()).unwrap();
        let d = &dialogues[0];
        assert_eq!(d.turns[0].gold_path.as_ref().unwrap().serialize(), "A\tr\tB");
        assert_eq!(d.turns[0].state_update.as_ref().unwrap().get("hotel-stars"), Some("3"));
        let back = write_dialogues(&dialogues);
        assert_eq!(read_dialogues(back.as_bytes()).unwrap(), dialogues);
    }

    #[test]
    fn memory_persona_is_append_only() {
        let mut m = Memory::default();
        assert!(m.remember_user_persona("I own a Jeep."));
        assert!(!m.remember_user_persona("I own a Jeep."));
        assert!(m.remember_user_persona("I enjoy exercising at the gym."));
        assert_eq!(m.user_persona.len(), 2);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn key() -> impl Strategy<Value = String> {
            ("[a-z][a-z0-9_]{0,6}", "[a-z][a-z0-9_]{0,6}").prop_map(|(d, s)| format!("{d}-{s}"))
        }

        fn state() -> impl Strategy<Value = DialogueState> {
            proptest::collection::btree_map(key(), "[a-z0-9][a-z0-9 ]{0,8}[a-z0-9]", 0..6)
                .prop_map(|m| DialogueState::from_pairs(m).unwrap())
        }

        fn node() -> impl Strategy<Value = String> {
            "[A-Za-z][A-Za-z ]{0,8}[a-z]"
        }

        proptest! {
            #[test]
            fn state_round_trip(s in state()) {
                prop_assert_eq!(parse_state_string(&s.serialize()).unwrap(), s);
            }

            #[test]
            fn updates_are_last_writer_wins(a in state(), b in state(), c in state()) {
                let ab_c = apply_state_update(&apply_state_update(&a, &b).unwrap(), &c).unwrap();
                let bc = apply_state_update(&b, &c).unwrap();
                let a_bc = apply_state_update(&a, &bc).unwrap();
                prop_assert_eq!(&ab_c, &a_bc);
                for (k, v) in c.iter() {
                    prop_assert_eq!(ab_c.get(k), Some(v));
                }
            }

            #[test]
            fn path_round_trip(a in node(), r1 in "~?[a-z_]{1,8}", b in node(), r2 in "~?[a-z_]{1,8}", c in node(), two in any::<bool>()) {
                let mut hops = vec![Triple::new(a, r1, b.clone())];
                if two {
                    hops.push(Triple::new(b, r2, c));
                }
                let path = GraphPath::new(hops).unwrap();
                prop_assert_eq!(parse_path_string(&path.serialize()).unwrap(), path);
            }
        }
    }
}
