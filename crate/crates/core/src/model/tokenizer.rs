//! Lossless byte-level tokenizer: byte `b` ↦ id `b + 4`.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const BYTE_OFFSET: u32 = 4;

/// Smallest vocabulary that covers every byte.
pub const BYTE_VOCAB: usize = 256 + BYTE_OFFSET as usize;

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b) + BYTE_OFFSET).collect()
}

/// Bytes for every id in the byte range; reserved and out-of-range ids are
/// dropped.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .filter_map(|&id| id.checked_sub(BYTE_OFFSET).and_then(|b| u8::try_from(b).ok()))
        .collect()
}

pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}
