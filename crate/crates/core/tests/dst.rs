use std::path::PathBuf;

use fsb_core::backend::{LanguageModel, MockSpec};
use fsb_core::dialogue::{load_dialogues, parse_state_string, Dialogue};
use fsb_core::parsing::track_state;
use fsb_core::prompt::{PromptText, TemplateRegistry};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dst").join(name)
}

fn setup() -> (Dialogue, std::sync::Arc<dyn LanguageModel>, Vec<String>) {
    let dialogue = load_dialogues(fixture("dialogue.jsonl")).unwrap().remove(0);
    let lm = serde_json::from_str::<MockSpec>(&std::fs::read_to_string(fixture("mock.json")).unwrap())
        .unwrap()
        .build();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixture("expected.json")).unwrap()).unwrap();
    let expected = v["states"].as_array().unwrap().iter().map(|s| s.as_str().unwrap().to_string()).collect();
    (dialogue, lm, expected)
}

#[test]
fn reproduces_hand_folded_states() {
    let (dialogue, lm, expected) = setup();
    let reg = TemplateRegistry::builtin();
    let track = track_state(&dialogue, reg.get("mwoz-dst").unwrap(), &PromptText::empty(), lm.as_ref()).unwrap();
    let got: Vec<String> = track.states.iter().map(|s| s.serialize()).collect();
    assert_eq!(got, expected);
    assert!(track.diagnostics.is_empty());
    for (s, e) in track.states.iter().zip(&expected) {
        assert_eq!(s, &parse_state_string(e).unwrap());
    }
}

#[test]
fn gold_annotations_are_never_read() {
    let (dialogue, lm, _) = setup();
    let reg = TemplateRegistry::builtin();
    let t = reg.get("mwoz-dst").unwrap();
    let mut stripped = dialogue.clone();
    for turn in &mut stripped.turns {
        turn.state_update = None;
    }
    let with_gold = track_state(&dialogue, t, &PromptText::empty(), lm.as_ref()).unwrap();
    let without = track_state(&stripped, t, &PromptText::empty(), lm.as_ref()).unwrap();
    assert_eq!(with_gold, without);
    // the gold second update differs from the prediction, so reading it would change turn three
    assert_ne!(dialogue.turns[2].state_update.as_ref(), Some(&with_gold.updates[1]));
}
