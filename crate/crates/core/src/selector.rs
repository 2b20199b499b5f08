//! Skill selection by prompt likelihood.
//!
//! Every skill `y` owns a k-shot prompt made of dialogue histories from that
//! skill. A new history `X` is scored under each prompt and the skill with
//! the highest total log-probability wins:
//!
//! ```text
//! s_y = sum log P(X | Prompt_y + "\n\n")
//! ```
//!
//! `X` is the same string for every label, so summed and length-normalized
//! scores give the same argmax.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel, TokenCounter};
use crate::dialogue::Dialogue;
use crate::fanout::map_bounded;
use crate::prompt::{render_skill_history, PromptText, RenderError, SHOT_SEPARATOR};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("prompt set is empty")]
    NoSkills,
    #[error("duplicate skill {0:?} in prompt set")]
    DuplicateSkill(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("scoring under skill {label:?} failed: {source}")]
    Backend {
        label: String,
        #[source]
        source: BackendError,
    },
    #[error("label {label:?} has {available} dialogues, {needed} needed")]
    NotEnoughDialogues { label: String, available: usize, needed: usize },
    #[error("test set is empty")]
    EmptyTest,
}

/// Skill prompts in registration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillPromptSet {
    entries: Vec<(String, PromptText)>,
}

impl SkillPromptSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, skill: impl Into<String>, prompt: PromptText) -> Result<(), SelectionError> {
        let skill = skill.into();
        if self.entries.iter().any(|(id, _)| *id == skill) {
            return Err(SelectionError::DuplicateSkill(skill));
        }
        self.entries.push((skill, prompt));
        Ok(())
    }

    /// Drops a skill; the others keep their prompts and order.
    pub fn remove(&mut self, skill: &str) -> Option<PromptText> {
        let i = self.entries.iter().position(|(id, _)| id == skill)?;
        Some(self.entries.remove(i).1)
    }

    /// A copy holding only the skills `keep` accepts.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|(id, _)| keep(id)).cloned().collect(),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn get(&self, skill: &str) -> Option<&PromptText> {
        self.entries.iter().find(|(id, _)| id == skill).map(|(_, p)| p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PromptText)> {
        self.entries.iter().map(|(id, p)| (id.as_str(), p))
    }

    /// Builds one prompt per label from its shot dialogues, each rendered
    /// with [`render_skill_history`].
    pub fn from_shots(shots: &[(String, Vec<Dialogue>)], counter: &dyn TokenCounter) -> Result<Self, SelectionError> {
        let mut set = Self::new();
        for (label, dialogues) in shots {
            let blocks = dialogues.iter().map(render_skill_history).collect::<Result<Vec<_>, _>>()?;
            let text = blocks.join(SHOT_SEPARATOR);
            let token_count = counter.count_tokens(&text).map_err(|source| SelectionError::Backend {
                label: label.clone(),
                source,
            })?;
            set.insert(
                label.clone(),
                PromptText {
                    text,
                    shot_count: dialogues.len(),
                    token_count,
                },
            )?;
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillScore {
    pub skill: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub skill: String,
    /// One entry per skill, in registration order.
    pub scores: Vec<SkillScore>,
}

/// Scoring context for a skill prompt.
pub fn selection_context(prompt: &PromptText) -> String {
    if prompt.text.is_empty() {
        String::new()
    } else {
        format!("{}{SHOT_SEPARATOR}", prompt.text)
    }
}

/// Picks the skill whose prompt gives `history` the highest log-probability.
/// Ties go to the skill registered first. Up to `in_flight` labels are
/// scored concurrently.
pub fn select_skill(
    history: &Dialogue,
    prompts: &SkillPromptSet,
    lm: &dyn LanguageModel,
    in_flight: usize,
) -> Result<Selection, SelectionError> {
    if prompts.is_empty() {
        return Err(SelectionError::NoSkills);
    }
    let rendered = render_skill_history(history)?;
    let results = map_bounded(&prompts.entries, in_flight, |(label, prompt)| {
        lm.score(&selection_context(prompt), &rendered)
            .map(|s| s.total())
            .map_err(|source| SelectionError::Backend {
                label: label.clone(),
                source,
            })
    });
    let mut scores = Vec::with_capacity(results.len());
    for ((label, _), r) in prompts.entries.iter().zip(results) {
        scores.push(SkillScore {
            skill: label.clone(),
            score: r?,
        });
    }
    let best = scores
        .iter()
        .fold(&scores[0], |best, s| if s.score > best.score { s } else { best });
    Ok(Selection {
        skill: best.skill.clone(),
        scores,
    })
}

/// A dialogue prefix ending in a user turn, labelled with its skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSample {
    pub history: Dialogue,
    pub label: String,
}

/// Splits a dialogue at every user turn: a dialogue with user turns at
/// 0, 2, 4 yields histories of 1, 3 and 5 turns.
pub fn split_by_user_turns(dialogue: &Dialogue) -> Vec<Dialogue> {
    dialogue
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_user())
        .map(|(i, _)| dialogue.prefix(i + 1))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDataset {
    /// Shot dialogues per label, in order of first appearance.
    pub shots: Vec<(String, Vec<Dialogue>)>,
    pub train: Vec<SelectionSample>,
    pub val: Vec<SelectionSample>,
    pub test: Vec<SelectionSample>,
}

fn samples(label: &str, dialogues: &[Dialogue]) -> Vec<SelectionSample> {
    dialogues
        .iter()
        .flat_map(split_by_user_turns)
        .map(|history| SelectionSample {
            history,
            label: label.to_string(),
        })
        .collect()
}

/// Splits labelled dialogues (label = `Dialogue::task`) into shots, test and
/// validation. Per label, after a seeded shuffle, the first `k` dialogues
/// become the prompt shots (and the training samples), the next `test_k` the
/// test set, and the rest validation.
pub fn build_selection_dataset(
    dialogues: &[Dialogue],
    k: usize,
    test_k: usize,
    seed: u64,
) -> Result<SelectionDataset, SelectionError> {
    let mut by_label: Vec<(String, Vec<Dialogue>)> = Vec::new();
    for d in dialogues {
        match by_label.iter_mut().find(|(l, _)| *l == d.task) {
            Some((_, v)) => v.push(d.clone()),
            None => by_label.push((d.task.clone(), vec![d.clone()])),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SelectionDataset {
        shots: Vec::new(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (label, mut pool) in by_label {
        if pool.len() < k + test_k {
            return Err(SelectionError::NotEnoughDialogues {
                label,
                available: pool.len(),
                needed: k + test_k,
            });
        }
        pool.shuffle(&mut rng);
        let (shots, rest) = pool.split_at(k);
        let (test, val) = rest.split_at(test_k);
        out.train.extend(samples(&label, shots));
        out.test.extend(samples(&label, test));
        out.val.extend(samples(&label, val));
        out.shots.push((label, shots.to_vec()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// gold label -> predicted label -> count
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Accuracy, macro-F1 (over every label that is gold or predicted at least
/// once) and the confusion matrix.
pub fn selector_report(pairs: &[(String, String)]) -> SelectorReport {
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (gold, pred) in pairs {
        *confusion.entry(gold.clone()).or_default().entry(pred.clone()).or_default() += 1;
    }
    let labels: BTreeSet<&String> = pairs.iter().flat_map(|(g, p)| [g, p]).collect();
    let correct = pairs.iter().filter(|(g, p)| g == p).count();
    let f1s: Vec<f64> = labels
        .iter()
        .map(|label| {
            let tp = pairs.iter().filter(|(g, p)| g == *label && p == *label).count() as f64;
            let predicted = pairs.iter().filter(|(_, p)| p == *label).count() as f64;
            let gold = pairs.iter().filter(|(g, _)| g == *label).count() as f64;
            if tp == 0.0 {
                return 0.0;
            }
            let (p, r) = (tp / predicted, tp / gold);
            2.0 * p * r / (p + r)
        })
        .collect();
    let n = pairs.len();
    SelectorReport {
        n,
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        macro_f1: if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 },
        confusion,
    }
}

pub fn evaluate_selector(
    test: &[SelectionSample],
    prompts: &SkillPromptSet,
    lm: &dyn LanguageModel,
    in_flight: usize,
) -> Result<SelectorReport, SelectionError> {
    if test.is_empty() {
        return Err(SelectionError::EmptyTest);
    }
    let mut pairs = Vec::with_capacity(test.len());
    for sample in test {
        let chosen = select_skill(&sample.history, prompts, lm, in_flight)?;
        pairs.push((sample.label.clone(), chosen.skill));
    }
    Ok(selector_report(&pairs))
}
