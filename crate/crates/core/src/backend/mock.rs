//! Deterministic in-process backends.
//!
//! * [`UniformBackend`]: every token has probability `1/V`.
//! * [`LookupBackend`]: next-token distributions keyed by context suffix
//!   (longest matching suffix wins; generation picks the most probable token,
//!   ties going to the lexicographically smallest).
//! * [`EchoBackend`]: scripted context-to-response pairs.
//!
//! All mocks count tokens as whitespace-delimited words and score text split
//! with [`split_pieces`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    finish_generation, split_pieces, truncate_at_stop, BackendDescriptor, BackendError, GenerationRequest, LanguageModel,
    ScoredContinuation, TokenCounter, WhitespaceTokens,
};

const DEFAULT_WINDOW: usize = 2048;

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn check_generate_window(req: &GenerationRequest, window: usize) -> Result<(), BackendError> {
    req.validate()?;
    let tokens = WhitespaceTokens.count_tokens(&req.context)?;
    let limit = window.saturating_sub(req.max_tokens);
    if tokens > limit {
        return Err(BackendError::ContextOverflow { tokens, limit });
    }
    Ok(())
}

fn check_score_window(context: &str, continuation: &str, window: usize) -> Result<(), BackendError> {
    let tokens = WhitespaceTokens.count_tokens(context)? + WhitespaceTokens.count_tokens(continuation)?;
    if tokens > window {
        return Err(BackendError::ContextOverflow { tokens, limit: window });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBackend {
    pub vocab_size: usize,
    #[serde(default = "default_window")]
    pub context_window: usize,
}

impl UniformBackend {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self {
            vocab_size,
            context_window: DEFAULT_WINDOW,
        }
    }

    pub fn with_window(mut self, context_window: usize) -> Self {
        self.context_window = context_window;
        self
    }
}

impl TokenCounter for UniformBackend {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        WhitespaceTokens.count_tokens(text)
    }
}

impl LanguageModel for UniformBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: format!("uniform-{}", self.vocab_size),
            context_window: self.context_window,
        }
    }

    /// Every continuation is equally likely, so greedy decoding emits nothing.
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        check_generate_window(req, self.context_window)?;
        Ok(String::new())
    }

    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        check_score_window(context, continuation, self.context_window)?;
        let lp = -(self.vocab_size as f64).ln();
        let tokens: Vec<String> = split_pieces(continuation).into_iter().map(str::to_string).collect();
        let logprobs = vec![lp; tokens.len()];
        ScoredContinuation::new(tokens, logprobs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupRule {
    /// Matches when the context ends with this string.
    pub suffix: String,
    /// Next-token probabilities.
    pub next: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupBackend {
    pub rules: Vec<LookupRule>,
    /// Probability of a token the matched distribution does not list, or of
    /// any token when no rule matches.
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_window")]
    pub context_window: usize,
}

fn default_floor() -> f64 {
    1e-6
}

impl LookupBackend {
    pub fn new(floor: f64) -> Self {
        Self {
            rules: Vec::new(),
            floor,
            context_window: DEFAULT_WINDOW,
        }
    }

    pub fn with_window(mut self, context_window: usize) -> Self {
        self.context_window = context_window;
        self
    }

    /// Adds (or extends) the distribution for `suffix`.
    pub fn rule<I, S>(mut self, suffix: impl Into<String>, next: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        self.add_rule(suffix, next);
        self
    }

    pub fn add_rule<I, S>(&mut self, suffix: impl Into<String>, next: I)
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let suffix = suffix.into();
        let next: Vec<(String, f64)> = next.into_iter().map(|(t, p)| (t.into(), p)).collect();
        for (_, p) in &next {
            assert!(*p > 0.0 && *p <= 1.0, "probability {p} out of (0, 1]");
        }
        match self.rules.iter_mut().find(|r| r.suffix == suffix) {
            Some(rule) => rule.next.extend(next),
            None => self.rules.push(LookupRule {
                suffix,
                next: next.into_iter().collect(),
            }),
        }
    }

    /// Distribution of the longest rule suffix matching `context`.
    pub fn lookup(&self, context: &str) -> Option<&BTreeMap<String, f64>> {
        self.rules
            .iter()
            .filter(|r| context.ends_with(&r.suffix))
            .fold(None::<&LookupRule>, |best, r| match best {
                Some(b) if b.suffix.len() >= r.suffix.len() => Some(b),
                _ => Some(r),
            })
            .map(|r| &r.next)
    }

    fn validate(&self) -> Result<(), BackendError> {
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(BackendError::InvalidRequest(format!("floor {} out of (0, 1]", self.floor)));
        }
        for r in &self.rules {
            if let Some((t, p)) = r.next.iter().find(|(_, p)| !(**p > 0.0 && **p <= 1.0)) {
                return Err(BackendError::InvalidRequest(format!("probability {p} for {t:?} out of (0, 1]")));
            }
        }
        Ok(())
    }
}

impl TokenCounter for LookupBackend {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        WhitespaceTokens.count_tokens(text)
    }
}

impl LanguageModel for LookupBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "lookup".into(),
            context_window: self.context_window,
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        check_generate_window(req, self.context_window)?;
        self.validate()?;
        let mut context = req.context.clone();
        let mut out = String::new();
        for _ in 0..req.max_tokens {
            let Some(dist) = self.lookup(&context) else { break };
            // BTreeMap iterates in token order, so strict `>` keeps the smallest on ties.
            let best = dist.iter().fold(None::<(&String, f64)>, |best, (t, p)| match best {
                Some((_, bp)) if bp >= *p => best,
                _ => Some((t, *p)),
            });
            let Some((token, _)) = best else { break };
            out.push_str(token);
            context.push_str(token);
            if req.stop_sequences.iter().any(|s| out.contains(s.as_str())) {
                break;
            }
        }
        Ok(truncate_at_stop(&out, &req.stop_sequences).to_string())
    }

    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        check_score_window(context, continuation, self.context_window)?;
        self.validate()?;
        let mut ctx = context.to_string();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        for piece in split_pieces(continuation) {
            let p = self
                .lookup(&ctx)
                .and_then(|d| d.get(piece).copied())
                .unwrap_or(self.floor);
            tokens.push(piece.to_string());
            logprobs.push(p.ln());
            ctx.push_str(piece);
        }
        ScoredContinuation::new(tokens, logprobs)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EchoRule {
    /// Context must end with this string (after trimming trailing spaces).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suffix: Option<String>,
    /// Context must contain this string.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub response: String,
}

impl EchoRule {
    fn matches(&self, context: &str) -> bool {
        let ctx = context.trim_end_matches(' ');
        self.suffix.as_deref().is_none_or(|s| ctx.ends_with(s)) && self.contains.as_deref().is_none_or(|s| context.contains(s))
    }
}

/// Scripted responses; the first matching rule wins. Scores are uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoBackend {
    pub rules: Vec<EchoRule>,
    #[serde(default)]
    pub default: String,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_window")]
    pub context_window: usize,
}

fn default_vocab() -> usize {
    50
}

impl Default for EchoBackend {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            default: String::new(),
            vocab_size: default_vocab(),
            context_window: DEFAULT_WINDOW,
        }
    }
}

impl EchoBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_suffix(mut self, suffix: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(EchoRule {
            suffix: Some(suffix.into()),
            contains: None,
            response: response.into(),
        });
        self
    }

    pub fn on_contains(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(EchoRule {
            suffix: None,
            contains: Some(needle.into()),
            response: response.into(),
        });
        self
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = response.into();
        self
    }

    pub fn with_window(mut self, context_window: usize) -> Self {
        self.context_window = context_window;
        self
    }
}

impl TokenCounter for EchoBackend {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        WhitespaceTokens.count_tokens(text)
    }
}

impl LanguageModel for EchoBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "echo".into(),
            context_window: self.context_window,
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        check_generate_window(req, self.context_window)?;
        let response = self
            .rules
            .iter()
            .find(|r| r.matches(&req.context))
            .map_or(self.default.as_str(), |r| r.response.as_str());
        Ok(finish_generation(response, req))
    }

    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        UniformBackend {
            vocab_size: self.vocab_size,
            context_window: self.context_window,
        }
        .score(context, continuation)
    }
}

/// Routes generation to one backend and scoring to another.
pub struct SplitBackend {
    pub generator: Arc<dyn LanguageModel>,
    pub scorer: Arc<dyn LanguageModel>,
}

impl SplitBackend {
    pub fn new(generator: Arc<dyn LanguageModel>, scorer: Arc<dyn LanguageModel>) -> Self {
        Self { generator, scorer }
    }
}

impl TokenCounter for SplitBackend {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        self.generator.count_tokens(text)
    }
}

impl LanguageModel for SplitBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.generator.descriptor()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.generator.generate(req)
    }
    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        self.scorer.score(context, continuation)
    }
}

/// Fails every generation whose context contains `marker`.
pub struct FaultyBackend {
    pub inner: Arc<dyn LanguageModel>,
    pub marker: String,
}

impl TokenCounter for FaultyBackend {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        self.inner.count_tokens(text)
    }
}

impl LanguageModel for FaultyBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.inner.descriptor()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        if req.context.contains(&self.marker) {
            return Err(BackendError::Fault(format!("generation refused for context containing {:?}", self.marker)));
        }
        self.inner.generate(req)
    }
    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        self.inner.score(context, continuation)
    }
}

/// JSON description of a mock backend, used by configuration files and the
/// command line (`--backend mock:<file>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockSpec {
    Uniform(UniformBackend),
    Lookup(LookupBackend),
    Echo(EchoBackend),
    Split { generate: Box<MockSpec>, score: Box<MockSpec> },
}

impl MockSpec {
    pub fn build(&self) -> Arc<dyn LanguageModel> {
        match self {
            MockSpec::Uniform(b) => Arc::new(b.clone()),
            MockSpec::Lookup(b) => Arc::new(b.clone()),
            MockSpec::Echo(b) => Arc::new(b.clone()),
            MockSpec::Split { generate, score } => Arc::new(SplitBackend::new(generate.build(), score.build())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::perplexity;

    #[test]
    fn uniform_scores() {
        let lm = UniformBackend::new(50);
        let s = lm.score("ctx", "a b c d").unwrap();
        assert_eq!(s.token_count(), 4);
        assert!(s.logprobs.iter().all(|lp| *lp == -(50f64.ln())));
        assert_eq!(perplexity(&lm, "ctx", "a b c d").unwrap(), 50.0);
        let empty = lm.score("ctx", "").unwrap();
        assert_eq!((empty.tokens.len(), empty.logprobs.len(), empty.token_count()), (0, 0, 0));
        assert_eq!(perplexity(&lm, "ctx", ""), Err(BackendError::EmptyContinuation));
    }

    #[test]
    fn lookup_scores_by_longest_suffix() {
        let lm = LookupBackend::new(1e-6)
            .rule("x", [(" a", 0.9)])
            .rule("ctx", [(" a", 0.5)])
            .rule("ctx a", [(" b", 0.25)]);
        let s = lm.score("ctx", " a b").unwrap();
        // closed form: [ln 0.5, ln 0.25]
        assert_eq!(s.logprobs, vec![0.5f64.ln(), 0.25f64.ln()]);
        let ppl = perplexity(&lm, "ctx", " a b").unwrap();
        assert!((ppl - 2.0 * 2f64.sqrt()).abs() < 1e-9);
        // unknown token falls to the floor
        assert_eq!(lm.score("ctx", " z").unwrap().logprobs, vec![1e-6f64.ln()]);
    }

    #[test]
    fn deterministic_mock_has_unit_perplexity() {
        let lm = LookupBackend::new(1e-6).rule("c", [(" x", 1.0)]).rule("x", [(" x", 1.0)]);
        assert_eq!(perplexity(&lm, "c", " x x x").unwrap(), 1.0);
    }

    #[test]
    fn lookup_generates_greedily() {
        let lm = LookupBackend::new(1e-6)
            .rule("KG:", [(" A", 0.4), (" B", 0.6)])
            .rule(" B", [("\tr", 0.5), ("\tq", 0.5)])
            .rule("\tq", [("\n", 1.0)]);
        let out = lm.generate(&GenerationRequest::new("KG:")).unwrap();
        // " B" wins on probability, "\tq" wins the tie lexicographically
        assert_eq!(out, " B\tq");
        let capped = lm.generate(&GenerationRequest::new("KG:").with_max_tokens(1)).unwrap();
        assert_eq!(capped, " B");
        assert_eq!(lm.generate(&GenerationRequest::new("nothing")).unwrap(), "");
    }

    #[test]
    fn echo_scripted() {
        let lm = EchoBackend::new()
            .on_suffix("Persona:", " i have two jobs.")
            .on_suffix("Assistant:", " taking you to chevron\nUser: more")
            .with_default("?");
        assert_eq!(lm.generate(&GenerationRequest::new("Dialogue:\nUser: hi\nPersona:")).unwrap(), " i have two jobs.");
        assert_eq!(lm.generate(&GenerationRequest::new("x\nAssistant:")).unwrap(), " taking you to chevron");
        assert_eq!(lm.generate(&GenerationRequest::new("other")).unwrap(), "?");
    }

    #[test]
    fn windows_are_enforced() {
        let lm = UniformBackend::new(10).with_window(10);
        let err = lm.generate(&GenerationRequest::new("a b c").with_max_tokens(8)).unwrap_err();
        assert_eq!(err, BackendError::ContextOverflow { tokens: 3, limit: 2 });
        assert!(lm.score("a b c d e f", "g h i j k").is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = MockSpec::Split {
            generate: Box::new(MockSpec::Echo(EchoBackend::new().on_suffix("Persona:", " hi"))),
            score: Box::new(MockSpec::Lookup(LookupBackend::new(1e-3).rule("a", [(" b", 0.5)]))),
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: MockSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let lm = back.build();
        assert_eq!(lm.generate(&GenerationRequest::new("Persona:")).unwrap(), " hi");
        assert_eq!(lm.score("a", " b").unwrap().logprobs, vec![0.5f64.ln()]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn words() -> impl Strategy<Value = String> {
            proptest::collection::vec("[a-c]{1,2}", 0..5).prop_map(|w| w.iter().map(|x| format!(" {x}")).collect())
        }

        fn table() -> impl Strategy<Value = LookupBackend> {
            proptest::collection::vec(("[a-c ]{0,4}", "[a-c]{1,2}", 0.05f64..1.0), 1..12).prop_map(|rules| {
                let mut lm = LookupBackend::new(1e-4);
                for (suffix, tok, p) in rules {
                    lm.add_rule(suffix, [(format!(" {tok}"), p)]);
                }
                lm
            })
        }

        proptest! {
            #[test]
            fn chain_rule_prefix_additivity(lm in table(), ctx in words(), a in words(), b in words()) {
                let whole = lm.score(&ctx, &format!("{a}{b}")).unwrap();
                let left = lm.score(&ctx, &a).unwrap();
                let right = lm.score(&format!("{ctx}{a}"), &b).unwrap();
                let joined: Vec<f64> = left.logprobs.iter().chain(&right.logprobs).copied().collect();
                prop_assert_eq!(whole.logprobs, joined);
            }

            #[test]
            fn greedy_is_repeatable(lm in table(), ctx in words()) {
                let req = GenerationRequest::new(ctx).with_max_tokens(6);
                prop_assert_eq!(lm.generate(&req).unwrap(), lm.generate(&req).unwrap());
            }

            #[test]
            fn perplexity_matches_scores(lm in table(), ctx in words(), cont in words()) {
                prop_assume!(!cont.is_empty());
                let s = lm.score(&ctx, &cont).unwrap();
                let mean = s.logprobs.iter().sum::<f64>() / s.logprobs.len() as f64;
                let ppl = perplexity(&lm, &ctx, &cont).unwrap();
                prop_assert!((ppl - (-mean).exp()).abs() <= 1e-9 * ppl.max(1.0));
            }
        }
    }
}
