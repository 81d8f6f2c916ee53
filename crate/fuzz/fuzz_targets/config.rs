#![no_main]

use easydistill::config::{parse_config_str, parse_relaxed};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_relaxed(text);
    if let Ok(parsed) = parse_config_str(text) {
        let _ = parsed.config.validate();
        let _ = parsed.config.redacted();
        let _ = parsed.config.to_json_string();
    }
});
