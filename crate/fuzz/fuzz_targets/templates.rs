#![no_main]

use easydistill::model::ChatTemplate;
use easydistill::synthesis::PromptTemplate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(source) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(t) = ChatTemplate::parse(source) {
        let _ = t.encode("sys", "question", "answer", 64);
        let _ = t.encode_prompt("sys", "question");
    }
    let _ = PromptTemplate::parse(source, &["instruction"], &["document"]);
});
