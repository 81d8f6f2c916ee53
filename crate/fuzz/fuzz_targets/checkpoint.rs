#![no_main]

use easydistill::model::checkpoint::{decode_blob, parse_index};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_index(data);
    // first two bytes pick a shape, the rest is the blob
    if let [rows, cols, blob @ ..] = data {
        let _ = decode_blob(blob, &[*rows as usize, *cols as usize]);
    }
});
