//! Knowledge sources: Wikipedia by title, a search engine, and a knowledge
//! graph, all loadable from offline fixture files.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::dialogue::{GraphPath, KnowledgeItem, Triple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("no entry for {0:?}")]
    NotFound(String),
    #[error("empty query")]
    EmptyQuery,
    #[error("duplicate title {0:?}")]
    DuplicateTitle(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("io: {0}")]
    Io(String),
}

impl RetrievalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RetrievalError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Wiki,
    Search,
    Kg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KnowledgeText {
    Sentence(String),
    Path(GraphPath),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedKnowledge {
    pub source: KnowledgeSource,
    pub text: KnowledgeText,
    /// Title, URL or serialized path the text came from.
    pub provenance: String,
}

impl RetrievedKnowledge {
    pub fn from_path(path: GraphPath) -> Self {
        Self {
            source: KnowledgeSource::Kg,
            provenance: path.serialize(),
            text: KnowledgeText::Path(path),
        }
    }

    /// The knowledge as turn annotations: one text item, or one triple per hop.
    pub fn items(&self) -> Vec<KnowledgeItem> {
        match &self.text {
            KnowledgeText::Sentence(s) => vec![KnowledgeItem::text(s.clone())],
            KnowledgeText::Path(p) => p
                .hops()
                .iter()
                .map(|t| KnowledgeItem::Triple {
                    triple: t.clone().into(),
                })
                .collect(),
        }
    }
}

fn single_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// The first sentence of a paragraph: everything up to and including the
/// first period followed by a space, or the whole paragraph.
pub fn first_sentence(paragraph: &str) -> String {
    let paragraph = single_line(paragraph);
    match paragraph.find(". ") {
        Some(i) => paragraph[..=i].to_string(),
        None => paragraph,
    }
}

fn normalize_title(title: &str) -> String {
    title.trim().nfc().collect()
}

fn jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| RetrievalError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RetrievalError::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>, RetrievalError> {
    let file = std::fs::File::open(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
    Ok(std::io::BufReader::new(file))
}

#[derive(Debug, Deserialize)]
struct WikiRecord {
    title: String,
    first_sentence: String,
}

/// Exact-title lookup of first sentences.
#[derive(Debug, Clone, Default)]
pub struct WikiIndex {
    pages: HashMap<String, String>,
}

impl WikiIndex {
    /// Reads JSONL records `{title, first_sentence}`.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, RetrievalError> {
        let mut pages = HashMap::new();
        for rec in jsonl::<WikiRecord>(reader)? {
            let title = normalize_title(&rec.title);
            if pages.insert(title.clone(), single_line(&rec.first_sentence)).is_some() {
                return Err(RetrievalError::DuplicateTitle(title));
            }
        }
        Ok(Self { pages })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::from_reader(open(path.as_ref())?)
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    /// Matching is exact after NFC normalization and trimming; case matters.
    pub fn first_sentence(&self, title: &str) -> Result<RetrievedKnowledge, RetrievalError> {
        let key = normalize_title(title);
        if key.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let sentence = self.pages.get(&key).ok_or_else(|| RetrievalError::NotFound(key.clone()))?;
        Ok(RetrievedKnowledge {
            source: KnowledgeSource::Wiki,
            text: KnowledgeText::Sentence(sentence.clone()),
            provenance: key,
        })
    }
}

/// A search engine returning the first sentence of its top result.
pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str) -> Result<RetrievedKnowledge, RetrievalError>;
}

#[derive(Debug, Deserialize)]
struct SearchRecord {
    query: String,
    first_sentence: String,
    #[serde(default)]
    url: String,
}

/// Canned search results keyed by exact query.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearch {
    results: HashMap<String, (String, String)>,
}

impl FixtureSearch {
    /// Reads JSONL records `{query, first_sentence, url}`. Later duplicates
    /// replace earlier ones.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, RetrievalError> {
        let results = jsonl::<SearchRecord>(reader)?
            .into_iter()
            .map(|r| (r.query.trim().to_string(), (first_sentence(&r.first_sentence), r.url)))
            .collect();
        Ok(Self { results })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        Self::from_reader(open(path.as_ref())?)
    }
}

impl SearchClient for FixtureSearch {
    fn search(&self, query: &str) -> Result<RetrievedKnowledge, RetrievalError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        let (sentence, url) = self
            .results
            .get(query)
            .ok_or_else(|| RetrievalError::NotFound(query.to_string()))?;
        Ok(RetrievedKnowledge {
            source: KnowledgeSource::Search,
            text: KnowledgeText::Sentence(sentence.clone()),
            provenance: url.clone(),
        })
    }
}

/// Directed graph of `(subject, relation, object)` triples.
///
/// Edges keep insertion order per subject and duplicates are dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeGraph {
    adjacency: HashMap<String, Vec<(String, String)>>,
    edges: usize,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an edge; returns `false` if it was already present.
    pub fn add(&mut self, subject: &str, relation: &str, object: &str) -> bool {
        let out = self.adjacency.entry(subject.to_string()).or_default();
        if out.iter().any(|(r, o)| r == relation && o == object) {
            return false;
        }
        out.push((relation.to_string(), object.to_string()));
        self.edges += 1;
        true
    }

    /// Reads `subject\trelation\tobject` lines.
    pub fn from_tsv(text: &str) -> Result<Self, RetrievalError> {
        let mut kg = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |message: String| RetrievalError::Format { line: i + 1, message };
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(bad("empty field".into()));
            }
            kg.add(fields[0], fields[1], fields[2]);
        }
        Ok(kg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_tsv(&text)
    }

    /// Deduplicated triples, sorted, one per line.
    pub fn to_tsv(&self) -> String {
        let lines: BTreeSet<String> = self
            .adjacency
            .iter()
            .flat_map(|(s, out)| out.iter().map(move |(r, o)| format!("{s}\t{r}\t{o}\n")))
            .collect();
        lines.into_iter().collect()
    }

    /// Outgoing edges of `node` in insertion order; empty for unknown nodes.
    pub fn neighbors(&self, node: &str) -> &[(String, String)] {
        self.adjacency.get(node).map_or(&[], Vec::as_slice)
    }

    pub fn objects<'a>(&'a self, subject: &str, relation: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.neighbors(subject)
            .iter()
            .filter(move |(r, _)| r == relation)
            .map(|(_, o)| o.as_str())
    }

    pub fn contains(&self, triple: &Triple) -> bool {
        self.neighbors(&triple.subject)
            .iter()
            .any(|(r, o)| *r == triple.relation && *o == triple.object)
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    /// Sorted subjects with at least one outgoing edge.
    pub fn subjects(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.adjacency.keys().map(String::as_str).collect();
        set.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KG: &str = "Anita Diamant\t~written_by\tThe Red Tent\n\
                      Anita Diamant\t~written_by\tThe Last Days of Dogtown\n\
                      Anita Diamant\tborn_in\tNewark\n\
                      Anita Diamant\t~written_by\tThe Red Tent\n\
                      Historical fiction\t~has_genre\tThe Weight of Water\n";

    #[test]
    fn neighbors_keep_insertion_order() {
        let kg = KnowledgeGraph::from_tsv(KG).unwrap();
        let n = kg.neighbors("Anita Diamant");
        assert_eq!(n.len(), 3);
        assert_eq!(n[0], ("~written_by".to_string(), "The Red Tent".to_string()));
        assert!(kg.neighbors("Nobody").is_empty());
        assert_eq!(kg.objects("Anita Diamant", "born_in").collect::<Vec<_>>(), vec!["Newark"]);
        assert_eq!(kg.edge_count(), 4);
    }

    #[test]
    fn tsv_round_trip_is_sorted_and_deduplicated() {
        let kg = KnowledgeGraph::from_tsv(KG).unwrap();
        let mut expected: Vec<&str> = KG.lines().collect();
        expected.sort();
        expected.dedup();
        let expected: String = expected.iter().map(|l| format!("{l}\n")).collect();
        assert_eq!(kg.to_tsv(), expected);
        assert_eq!(KnowledgeGraph::from_tsv(&kg.to_tsv()).unwrap().to_tsv(), expected);
        assert!(KnowledgeGraph::from_tsv("a\tb").is_err());
    }

    #[test]
    fn wiki_lookup_is_exact() {
        let data = r#"{"title": "Target Corporation", "first_sentence": "Target Corporation is an American retail corporation."}"#;
        let wiki = WikiIndex::from_reader(data.as_bytes()).unwrap();
        let hit = wiki.first_sentence("Target Corporation").unwrap();
        assert_eq!(hit.provenance, "Target Corporation");
        assert_eq!(
            wiki.first_sentence(" target corporation "),
            Err(RetrievalError::NotFound("target corporation".into()))
        );
        let dup = format!("{data}\n{data}\n");
        assert!(matches!(WikiIndex::from_reader(dup.as_bytes()), Err(RetrievalError::DuplicateTitle(_))));
    }

    #[test]
    fn nfc_titles_match() {
        let data = "{\"title\": \"Caf\u{e9}\", \"first_sentence\": \"A place.\"}";
        let wiki = WikiIndex::from_reader(data.as_bytes()).unwrap();
        assert!(wiki.first_sentence("Cafe\u{301}").is_ok());
    }

    #[test]
    fn sentence_boundary() {
        assert_eq!(first_sentence("One. Two. Three"), "One.");
        assert_eq!(first_sentence("no period here"), "no period here");
        assert_eq!(first_sentence("Washington, D.C., in the US."), "Washington, D.C., in the US.");
        assert_eq!(first_sentence("line\nbreak. next"), "line break.");
    }

    #[test]
    fn fixture_search() {
        let data = r#"{"query": "Kenny Golladay Rumors: Giant", "first_sentence": "Golladay is questionable. More text.", "url": "https://example.org/kg"}"#;
        let s = FixtureSearch::from_reader(data.as_bytes()).unwrap();
        let hit = s.search("Kenny Golladay Rumors: Giant").unwrap();
        assert_eq!(hit.text, KnowledgeText::Sentence("Golladay is questionable.".into()));
        assert_eq!(s.search(""), Err(RetrievalError::EmptyQuery));
        assert!(matches!(s.search("other"), Err(RetrievalError::NotFound(_))));
    }
}
