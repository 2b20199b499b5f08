use fsb_core::backend::{TokenCounter, WhitespaceTokens};
use fsb_core::dialogue::{Dialogue, Turn};
use fsb_core::prompt::{assemble_prompt, PromptError, TemplateRegistry};
use proptest::prelude::*;

fn shot(i: usize, words: usize) -> Dialogue {
    let text = vec!["word"; words.max(1)].join(" ");
    Dialogue::new(format!("s{i}"), "dd", vec![Turn::user(text.clone()), Turn::assistant(text)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn prompts_fit_and_grow_with_budget(
        sizes in proptest::collection::vec(1usize..40, 0..8),
        query_words in 1usize..30,
        budget in 0usize..300,
        extra in 0usize..200,
    ) {
        let reg = TemplateRegistry::builtin();
        let t = reg.get("dd").unwrap();
        let shots: Vec<Dialogue> = sizes.iter().enumerate().map(|(i, n)| shot(i, *n)).collect();
        let query = format!("Dialogue:\nUserA: {}\nUserB:", vec!["q"; query_words].join(" "));
        let query_tokens = WhitespaceTokens.count_tokens(&query).unwrap();
        match assemble_prompt(&shots, &query, t, budget, &WhitespaceTokens) {
            Ok(p) => {
                prop_assert!(p.token_count <= budget);
                prop_assert_eq!(p.token_count, WhitespaceTokens.count_tokens(&p.text).unwrap());
                prop_assert!(p.text.ends_with(&query));
                let bigger = assemble_prompt(&shots, &query, t, budget + extra, &WhitespaceTokens).unwrap();
                prop_assert!(bigger.shot_count >= p.shot_count);
            }
            Err(PromptError::QueryOverBudget { tokens, .. }) => {
                prop_assert!(tokens > budget);
                prop_assert_eq!(tokens, query_tokens);
            }
            Err(e) => prop_assert!(false, "{e}"),
        }
    }
}
