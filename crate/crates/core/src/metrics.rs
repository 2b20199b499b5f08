//! Automatic metrics: unigram F1, knowledge F1, BLEU-4, ROUGE-L, entity F1,
//! joint goal accuracy, path recall and retrieval precision.
//!
//! Text metrics compare normalized tokens: lowercased, every character that
//! is neither alphanumeric nor whitespace replaced by a space, split on
//! whitespace. Stop words are kept.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::dialogue::{DialogueState, GraphPath};

/// Smoothing value used for n-gram orders with no match.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{predicted} predicted states for {gold} gold states")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("global entity list is empty")]
    NoEntities,
}

pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

fn counts<'a>(tokens: impl IntoIterator<Item = &'a [String]>) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

fn overlap(pred: &[String], reference: &[String], n: usize) -> usize {
    let r = counts(reference.windows(n));
    counts(pred.windows(n))
        .iter()
        .map(|(gram, c)| (*c).min(r.get(gram).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(matched: usize, predicted: usize, gold: usize) -> f64 {
    if matched == 0 || predicted == 0 || gold == 0 {
        return 0.0;
    }
    let p = matched as f64 / predicted as f64;
    let r = matched as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

pub fn unigram_f1(prediction: &str, reference: &str) -> f64 {
    let (p, r) = (normalize(prediction), normalize(reference));
    f_measure(overlap(&p, &r, 1), p.len(), r.len())
}

/// Unigram F1 against the knowledge the response should use.
pub fn kf1(prediction: &str, knowledge: &str) -> f64 {
    unigram_f1(prediction, knowledge)
}

/// Sentence BLEU with n-gram orders up to `min(4, |prediction|)`, uniform
/// weights, zero-match orders smoothed to [`BLEU_EPSILON`], and brevity
/// penalty `exp(1 - r/c)` when the prediction is shorter.
pub fn bleu4(prediction: &str, reference: &str) -> f64 {
    let (p, r) = (normalize(prediction), normalize(reference));
    let c = p.len();
    if c == 0 {
        return 0.0;
    }
    let order = c.min(4);
    let log_precision: f64 = (1..=order)
        .map(|n| {
            let total = (c - n + 1) as f64;
            let matched = overlap(&p, &r, n) as f64;
            (if matched == 0.0 { BLEU_EPSILON } else { matched } / total).ln()
        })
        .sum::<f64>()
        / order as f64;
    let bp = if c < r.len() { (1.0 - r.len() as f64 / c as f64).exp() } else { 1.0 };
    bp * log_precision.exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F-measure with beta = 1.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let (p, r) = (normalize(prediction), normalize(reference));
    f_measure(lcs(&p, &r), p.len(), r.len())
}

/// Global entity list, matched longest-first on normalized tokens.
#[derive(Debug, Clone)]
pub struct EntityList {
    entities: Vec<Vec<String>>,
}

impl EntityList {
    pub fn new<I, S>(entities: I) -> Result<Self, MetricError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut entities: Vec<Vec<String>> = entities
            .into_iter()
            .map(|e| normalize(e.as_ref()))
            .filter(|e| !e.is_empty())
            .collect();
        entities.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        entities.dedup();
        if entities.is_empty() {
            return Err(MetricError::NoEntities);
        }
        Ok(Self { entities })
    }

    /// Entities mentioned in `text`, scanning left to right and taking the
    /// longest entity that starts at each position.
    pub fn detect(&self, text: &str) -> Vec<String> {
        let tokens = normalize(text);
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match self.entities.iter().find(|e| tokens[i..].starts_with(e)) {
                Some(e) => {
                    found.push(e.join(" "));
                    i += e.len();
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Entity match counts; add them up across examples for micro-averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EntityCounts {
    pub fn add(&mut self, other: EntityCounts) {
        self.matched += other.matched;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    /// F1 of the counts; 1.0 when nothing was expected and nothing predicted.
    pub fn f1(&self) -> f64 {
        if self.predicted == 0 && self.gold == 0 {
            return 1.0;
        }
        f_measure(self.matched, self.predicted, self.gold)
    }
}

pub fn entity_counts<S: AsRef<str>>(prediction: &str, gold_entities: &[S], entities: &EntityList) -> EntityCounts {
    let predicted = entities.detect(prediction);
    let gold: Vec<String> = gold_entities
        .iter()
        .map(|g| normalize(g.as_ref()).join(" "))
        .filter(|g| !g.is_empty())
        .collect();
    let mut remaining = counts(gold.iter().map(std::slice::from_ref));
    let mut matched = 0;
    for p in &predicted {
        if let Some(c) = remaining.get_mut(std::slice::from_ref(p)).filter(|c| **c > 0) {
            *c -= 1;
            matched += 1;
        }
    }
    EntityCounts {
        matched,
        predicted: predicted.len(),
        gold: gold.len(),
    }
}

pub fn entity_f1<S: AsRef<str>>(prediction: &str, gold_entities: &[S], entities: &EntityList) -> f64 {
    entity_counts(prediction, gold_entities, entities).f1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DstScores {
    pub jga: f64,
    pub slot_accuracy: f64,
}

fn dst_value(v: &str) -> String {
    v.trim().to_lowercase()
}

/// Per-turn state comparison: `(state exactly right, slots right, slots compared)`.
pub fn dst_turn(predicted: &DialogueState, gold: &DialogueState) -> (bool, usize, usize) {
    let mut keys: Vec<&str> = predicted.iter().map(|(k, _)| k).chain(gold.iter().map(|(k, _)| k)).collect();
    keys.sort_unstable();
    keys.dedup();
    let right = keys
        .iter()
        .filter(|k| match (predicted.get(k), gold.get(k)) {
            (Some(p), Some(g)) => dst_value(p) == dst_value(g),
            _ => false,
        })
        .count();
    (right == keys.len(), right, keys.len())
}

/// Joint goal accuracy and slot accuracy over aligned per-turn states.
/// Values are compared trimmed and lowercased. A slot present on only one
/// side counts as wrong.
pub fn jga(predicted: &[DialogueState], gold: &[DialogueState]) -> Result<DstScores, MetricError> {
    if predicted.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            predicted: predicted.len(),
            gold: gold.len(),
        });
    }
    let (mut joint, mut right, mut total) = (0usize, 0usize, 0usize);
    for (p, g) in predicted.iter().zip(gold) {
        let (ok, r, t) = dst_turn(p, g);
        joint += usize::from(ok);
        right += r;
        total += t;
    }
    Ok(DstScores {
        jga: if gold.is_empty() { 1.0 } else { joint as f64 / gold.len() as f64 },
        slot_accuracy: if total == 0 { 1.0 } else { right as f64 / total as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRecall {
    pub k: usize,
    pub path: f64,
    pub target: f64,
}

/// Path@k and Tgt@k for one ranked list.
pub fn path_recall_at_k(ranked: &[GraphPath], gold: &GraphPath, ks: &[usize]) -> Vec<PathRecall> {
    ks.iter()
        .map(|&k| {
            let top = &ranked[..k.min(ranked.len())];
            PathRecall {
                k,
                path: f64::from(u8::from(top.contains(gold))),
                target: f64::from(u8::from(top.iter().any(|p| p.target() == gold.target()))),
            }
        })
        .collect()
}

fn fold_title(title: &str) -> String {
    title.trim().nfc().collect::<String>().to_lowercase()
}

/// 1.0 when the titles match after NFC normalization, trimming and
/// lowercasing.
pub fn rprec(predicted_title: &str, gold_title: &str) -> f64 {
    f64::from(u8::from(fold_title(predicted_title) == fold_title(gold_title)))
}

/// Mean and population standard deviation of per-run values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n_runs: usize,
    pub runs: Vec<f64>,
}

impl MetricSummary {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
                n_runs: 0,
                runs,
            };
        }
        let mean = runs.iter().sum::<f64>() / n as f64;
        let var = runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n_runs: n,
            runs,
        }
    }
}

/// Renders rows of `metric -> summary` as an aligned table, one row per
/// label, each cell `mean ± std` scaled to percent.
pub fn text_table(rows: &[(String, BTreeMap<String, MetricSummary>)]) -> String {
    let mut metrics: Vec<&String> = rows.iter().flat_map(|(_, m)| m.keys()).collect();
    metrics.sort();
    metrics.dedup();
    let cell = |s: Option<&MetricSummary>| match s {
        Some(s) => format!("{:.2} ± {:.2}", s.mean * 100.0, s.std * 100.0),
        None => "-".to_string(),
    };
    let mut table: Vec<Vec<String>> = vec![std::iter::once(String::new()).chain(metrics.iter().map(|m| m.to_string())).collect()];
    for (label, values) in rows {
        table.push(
            std::iter::once(label.clone())
                .chain(metrics.iter().map(|m| cell(values.get(*m))))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                let pad = w - cell.chars().count();
                if i == 0 {
                    format!("{cell}{}", " ".repeat(pad))
                } else {
                    format!("{}{cell}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
