use fsb_web_demo::{dst_fold, render_prompt, text_metrics};

#[test]
fn renders_bundled_and_custom_dialogues() {
    let golden = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/golden/dd.txt")).unwrap();
    let full = render_prompt("dd", "").unwrap();
    assert!(full.starts_with(&golden));
    let custom = r#"{"id": "x", "task": "ed", "turns": [{"speaker": "user", "text": "I lost my keys."}, {"speaker": "assistant", "text": "Oh no!"}]}"#;
    assert_eq!(render_prompt("ed", custom).unwrap(), "Dialogue:\nUser: I lost my keys.\nEmpath: Oh no!");
    assert!(render_prompt("nope", "").is_err());
    assert!(render_prompt("ed", "{").is_err());
}

#[test]
fn metrics_as_json() {
    let v: serde_json::Value = serde_json::from_str(&text_metrics("the cat sat", "the cat sat")).unwrap();
    assert_eq!(v["f1"], 1.0);
    assert_eq!(v["rouge_l"], 1.0);
    let v: serde_json::Value = serde_json::from_str(&text_metrics("a b", "c d")).unwrap();
    assert_eq!(v["f1"], 0.0);
}

#[test]
fn folds_updates_line_by_line() {
    let out = dst_fold("hotel-area=north, hotel-pricerange=cheap\nhotel-area=centre, hotel-parking=yes\n\n").unwrap();
    assert_eq!(
        out,
        "hotel-area=north, hotel-pricerange=cheap\n\
         hotel-area=centre, hotel-parking=yes, hotel-pricerange=cheap\n\
         hotel-area=centre, hotel-parking=yes, hotel-pricerange=cheap"
    );
    assert!(dst_fold("no equals sign").unwrap_err().starts_with("line 1"));
}
