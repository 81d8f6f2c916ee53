//! Parsers for teacher emissions.

pub const INSTRUCTION_MARKER: &str = "### Instruction:";
pub const RESPONSE_MARKER: &str = "### Response:";

/// Result of parsing one pairs emission.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedPairs {
    pub pairs: Vec<(String, String)>,
    /// Fragments that could not be turned into a pair.
    pub dropped: usize,
}

/// Extract `### Instruction:` / `### Response:` blocks. Stray text, an
/// instruction without a response, a response without an instruction, or
/// an empty field each count as one dropped fragment.
pub fn parse_pairs(text: &str) -> ParsedPairs {
    enum State {
        Preamble(String),
        Instruction(String),
        Response(String, String),
        // body of a response with no instruction; already counted
        Orphan,
    }
    let mut out = ParsedPairs::default();
    let mut state = State::Preamble(String::new());

    fn close(state: State, out: &mut ParsedPairs) {
        match state {
            State::Preamble(t) => {
                if !t.trim().is_empty() {
                    out.dropped += 1;
                }
            }
            State::Instruction(_) => out.dropped += 1,
            State::Orphan => {}
            State::Response(i, r) => {
                let (i, r) = (i.trim(), r.trim());
                if i.is_empty() || r.is_empty() {
                    out.dropped += 1;
                } else {
                    out.pairs.push((i.to_string(), r.to_string()));
                }
            }
        }
    }

    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix(INSTRUCTION_MARKER) {
            close(std::mem::replace(&mut state, State::Preamble(String::new())), &mut out);
            state = State::Instruction(rest.trim().to_string());
        } else if let Some(rest) = trimmed.strip_prefix(RESPONSE_MARKER) {
            state = match state {
                State::Instruction(i) => State::Response(i, rest.trim().to_string()),
                other => {
                    close(other, &mut out);
                    out.dropped += 1;
                    State::Orphan
                }
            };
        } else {
            match &mut state {
                State::Preamble(t) | State::Instruction(t) | State::Response(_, t) => {
                    if !t.is_empty() {
                        t.push('\n');
                    }
                    t.push_str(line);
                }
                State::Orphan => {}
            }
        }
    }
    close(state, &mut out);
    out
}

/// Split `<begin>reasoning<end>answer`. Returns `None` when either marker
/// is missing or the reasoning is empty.
pub fn split_cot(text: &str, begin: &str, end: &str) -> Option<(String, String)> {
    if begin.is_empty() || end.is_empty() {
        return None;
    }
    let start = text.find(begin)? + begin.len();
    let stop = start + text[start..].find(end)?;
    let reasoning = text[start..stop].trim();
    if reasoning.is_empty() {
        return None;
    }
    Some((reasoning.to_string(), text[stop + end.len()..].trim().to_string()))
}

/// Reasoning from a rewrite: the text between the markers when present,
/// otherwise the whole emission.
pub fn extract_reasoning(text: &str, begin: &str, end: &str) -> String {
    split_cot(text, begin, end)
        .map(|(r, _)| r)
        .unwrap_or_else(|| text.trim().to_string())
}

/// Split `doc` into chunks of at most `max_bytes` bytes on character
/// boundaries, preferring to break after whitespace.
pub fn chunk_text(doc: &str, max_bytes: usize) -> Vec<String> {
    let max_bytes = max_bytes.max(4);
    let mut chunks = Vec::new();
    let mut rest = doc.trim();
    while !rest.is_empty() {
        if rest.len() <= max_bytes {
            chunks.push(rest.to_string());
            break;
        }
        let mut cut = max_bytes;
        while !rest.is_char_boundary(cut) {
            cut -= 1;
        }
        if let Some(ws) = rest[..cut].rfind(char::is_whitespace).filter(|&w| w > 0) {
            cut = ws;
        }
        let (head, tail) = rest.split_at(cut);
        chunks.push(head.trim_end().to_string());
        rest = tail.trim_start();
    }
    chunks
}
