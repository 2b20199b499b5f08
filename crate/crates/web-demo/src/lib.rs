//! WebAssembly bindings for the demo page in `www/`.
//!
//! Build with `wasm-pack build --target web --out-dir www/pkg`.

use fsb_core::bot::BUNDLED_SHOTS;
use fsb_core::dialogue::{apply_state_update, parse_state_string, read_dialogues, Dialogue, DialogueState};
use fsb_core::metrics::{bleu4, rouge_l, unigram_f1};
use fsb_core::prompt::{render_shot, TemplateRegistry};
use wasm_bindgen::prelude::*;

/// Renders `dialogue_json` as a shot of template `task`. An empty dialogue
/// renders the bundled example for that task.
#[wasm_bindgen]
pub fn render_prompt(task: &str, dialogue_json: &str) -> Result<String, String> {
    let registry = TemplateRegistry::builtin();
    let template = registry.get(task).map_err(|e| e.to_string())?;
    let dialogue: Dialogue = if dialogue_json.trim().is_empty() {
        read_dialogues(BUNDLED_SHOTS.as_bytes())
            .map_err(|e| e.to_string())?
            .into_iter()
            .find(|d| d.task == task)
            .ok_or_else(|| format!("no bundled example for {task}"))?
    } else {
        serde_json::from_str(dialogue_json).map_err(|e| e.to_string())?
    };
    render_shot(&dialogue, template, None).map_err(|e| e.to_string())
}

/// `{"f1": .., "bleu4": .., "rouge_l": ..}` for a prediction/reference pair.
#[wasm_bindgen]
pub fn text_metrics(prediction: &str, reference: &str) -> String {
    serde_json::json!({
        "f1": unigram_f1(prediction, reference),
        "bleu4": bleu4(prediction, reference),
        "rouge_l": rouge_l(prediction, reference),
    })
    .to_string()
}

/// Folds one `domain-slot=value, ...` update per line into the running
/// state; returns the serialized state after each line, one per line.
#[wasm_bindgen]
pub fn dst_fold(updates: &str) -> Result<String, String> {
    let mut state = DialogueState::new();
    let mut out = Vec::new();
    for (i, line) in updates.lines().enumerate() {
        let update = parse_state_string(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        state = apply_state_update(&state, &update).map_err(|e| format!("line {}: {e}", i + 1))?;
        out.push(state.serialize());
    }
    Ok(out.join("\n"))
}
