#![no_main]

//! Teacher output parsers used by the synthesis operators.

use easydistill::synthesis::{chunk_text, extract_reasoning, parse_pairs, split_cot};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let _ = parse_pairs(&text);
    let _ = split_cot(&text, "<think>", "</think>");
    let _ = extract_reasoning(&text, "<think>", "</think>");
    let max = data.first().map_or(16, |&b| b as usize);
    for chunk in chunk_text(&text, max) {
        assert!(!chunk.is_empty());
    }
});
