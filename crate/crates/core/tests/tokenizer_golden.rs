mod common;

use segvoc::text::BpeTokenizer;

#[test]
fn fifty_prompt_corpus_matches_reference_ids() {
    let golden: serde_json::Value = serde_json::from_slice(
        &std::fs::read(common::fixtures().join("golden/tokens.golden.json")).unwrap(),
    )
    .unwrap();
    let ctx = golden["context_length"].as_u64().unwrap() as usize;
    let tokenizer = BpeTokenizer::from_file(&common::models().join("bpe_merges.txt")).unwrap();
    let prompts = golden["prompts"].as_array().unwrap();
    assert_eq!(prompts.len(), 50);
    let mut mismatches = Vec::new();
    for (prompt, ids) in prompts.iter().zip(golden["ids"].as_array().unwrap()) {
        let expected: Vec<i64> = ids.as_array().unwrap().iter().map(|v| v.as_i64().unwrap()).collect();
        let got = tokenizer.tokenize(prompt.as_str().unwrap(), ctx).unwrap();
        if got.ids != expected {
            mismatches.push(prompt.as_str().unwrap().to_owned());
        }
    }
    assert!(mismatches.is_empty(), "mismatched prompts: {mismatches:?}");
}
