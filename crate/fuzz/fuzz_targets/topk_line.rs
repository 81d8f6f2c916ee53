#![no_main]

use easydistill::records::parse_topk_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        let _ = parse_topk_line(line);
    }
});
