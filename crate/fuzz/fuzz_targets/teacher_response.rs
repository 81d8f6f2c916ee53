#![no_main]

//! Chat completion bodies, both plain JSON and server-sent event streams.

use easydistill::teacher::{parse_chat_response, parse_sse_stream};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let body = String::from_utf8_lossy(data);
    let _ = parse_chat_response(&body);
    let _ = parse_sse_stream(&body);
});
