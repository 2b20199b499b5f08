use std::sync::atomic::{AtomicUsize, Ordering};

use fsb_core::backend::{BackendDescriptor, BackendError, EchoBackend, GenerationRequest, LanguageModel, ScoredContinuation, TokenCounter};
use fsb_core::dialogue::{Dialogue, Turn};
use fsb_core::harness::{run_eval, sample_shots, EvalData, TaskConfig};
use fsb_core::prompt::TemplateRegistry;

/// Counts generation calls.
struct Counting<L> {
    inner: L,
    calls: AtomicUsize,
}

impl<L: LanguageModel> TokenCounter for Counting<L> {
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        self.inner.count_tokens(text)
    }
}

impl<L: LanguageModel> LanguageModel for Counting<L> {
    fn descriptor(&self) -> BackendDescriptor {
        self.inner.descriptor()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(req)
    }
    fn score(&self, context: &str, continuation: &str) -> Result<ScoredContinuation, BackendError> {
        self.inner.score(context, continuation)
    }
}

fn data() -> EvalData {
    let shot = |id: &str, word: &str| Dialogue::new(id, "ed", vec![Turn::user(format!("tell me about {word}")), Turn::assistant(word)]);
    let test = (0..3)
        .map(|i| Dialogue::new(format!("t{i}"), "ed", vec![Turn::user(format!("question {i}")), Turn::assistant("a b c d e")]))
        .collect();
    EvalData {
        validation: vec![shot("v0", "alpha"), shot("v1", "beta")],
        test,
        kg: None,
        entities: None,
    }
}

// The reply depends on which shot was sampled: F1 0.4 with alpha, 0.6 with beta.
fn scripted() -> EchoBackend {
    EchoBackend::new()
        .on_contains("Empath: alpha", " a b x y z")
        .on_contains("Empath: beta", " a b c y z")
}

fn config() -> TaskConfig {
    let mut c = TaskConfig::new("ed", "unused", "unused");
    c.shots = vec![1];
    c.runs = 2;
    c.seed = 3;
    c.metrics = vec!["f1".into()];
    c
}

#[test]
fn runs_sample_different_shots() {
    let d = data();
    let a = sample_shots(&d.validation, 1, 3, 0).unwrap();
    let b = sample_shots(&d.validation, 1, 3, 1).unwrap();
    assert_ne!(a[0].id, b[0].id);
}

#[test]
fn mean_and_std_match_hand_arithmetic() {
    let report = run_eval(&config(), &data(), &TemplateRegistry::builtin(), &scripted(), None).unwrap();
    let f1 = &report.results[0].metrics["f1"];
    assert!((f1.mean - 0.5).abs() < 1e-12);
    assert!((f1.std - 0.1).abs() < 1e-12);
    assert_eq!(f1.n_runs, 2);
    let mut runs = f1.runs.clone();
    runs.sort_by(f64::total_cmp);
    assert!((runs[0] - 0.4).abs() < 1e-12 && (runs[1] - 0.6).abs() < 1e-12);
}

#[test]
fn reports_are_byte_identical() {
    let reg = TemplateRegistry::builtin();
    let mut c = config();
    let a = run_eval(&c, &data(), &reg, &scripted(), None).unwrap().to_json();
    c.in_flight = 4;
    let b = run_eval(&c, &data(), &reg, &scripted(), None).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn resume_after_kill_equals_uninterrupted() {
    let reg = TemplateRegistry::builtin();
    let dir = tempfile::tempdir().unwrap();
    let full_log = dir.path().join("full.jsonl");
    let uninterrupted = run_eval(&config(), &data(), &reg, &scripted(), Some(&full_log)).unwrap();

    // keep four finished examples and a torn fifth line
    let text = std::fs::read_to_string(&full_log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6);
    let partial = dir.path().join("partial.jsonl");
    std::fs::write(&partial, format!("{}\n{}", lines[..4].join("\n"), &lines[4][..lines[4].len() / 2])).unwrap();

    let lm = Counting {
        inner: scripted(),
        calls: AtomicUsize::new(0),
    };
    let resumed = run_eval(&config(), &data(), &reg, &lm, Some(&partial)).unwrap();
    assert_eq!(resumed.to_json(), uninterrupted.to_json());
    assert_eq!(lm.calls.load(Ordering::SeqCst), 2);
}

#[test]
fn prompts_stay_within_budget() {
    let reg = TemplateRegistry::builtin();
    let mut c = config();
    c.max_tokens = 10;
    let lm = scripted().with_window(25);
    let report = run_eval(&c, &data(), &reg, &lm, None).unwrap();
    assert_eq!(report.budget, 15);
    for run in &report.results[0].runs {
        assert!(run.max_prompt_tokens <= 15);
    }
}

#[test]
fn oversized_queries_are_counted_as_failures() {
    let reg = TemplateRegistry::builtin();
    let mut c = config();
    c.max_tokens = 2046;
    let report = run_eval(&c, &data(), &reg, &scripted(), None).unwrap();
    assert_eq!(report.results[0].failed, 6);
    assert!(report.results[0].metrics.is_empty());
}
