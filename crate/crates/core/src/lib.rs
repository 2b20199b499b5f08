//! Prompt-based few-shot dialogue.
//!
//! A language model is taught each dialogue skill by a handful of rendered
//! example dialogues placed in its context. This crate renders those prompts
//! byte-exactly, picks the skill whose prompt makes a dialogue history most
//! likely, runs the parsing skills that fetch knowledge, scores outputs, and
//! ties everything together in [`bot::FewShotBot`].
//!
//! Language models sit behind [`backend::LanguageModel`]; deterministic mocks
//! live in [`backend::mock`].

pub mod backend;
pub mod dialogue;
pub mod prompt;
pub mod fanout;
pub mod metrics;
pub mod parsing;
pub mod retrieval;
pub mod selector;
pub mod harness;
pub mod bot;
