//! Restricted chat templates: plain text with `{system}`, `{user}` and
//! `{assistant}` slots. `{{` and `}}` escape literal braces.

use std::ops::Range;
use std::path::Path;

use super::tokenizer::{tokenize, BOS, EOS};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "S:{system}\nU:{user}\nA:{assistant}";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatTemplate {
    source: String,
    segments: Vec<Segment>,
}

/// Rendered conversation with the byte range of the assistant response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub response: Range<usize>,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

impl ChatTemplate {
    pub fn parse(source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = source.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let rest = &source[i + 1..];
                    let end = rest
                        .find('}')
                        .ok_or_else(|| Error::Template(format!("unclosed placeholder at byte {i}")))?;
                    let slot = match &rest[..end] {
                        "system" => Slot::System,
                        "user" => Slot::User,
                        "assistant" => Slot::Assistant,
                        other => return Err(Error::Template(format!("unknown placeholder {{{other}}}"))),
                    };
                    for _ in 0..=end {
                        chars.next();
                    }
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Slot(slot));
                }
                '}' => return Err(Error::Template(format!("unmatched '}}' at byte {i}"))),
                c => text.push(c),
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        for (slot, name) in [(Slot::User, "user"), (Slot::Assistant, "assistant")] {
            if !segments.contains(&Segment::Slot(slot)) {
                return Err(Error::Template(format!("missing required placeholder {{{name}}}")));
            }
        }
        let assistant_count = segments.iter().filter(|s| **s == Segment::Slot(Slot::Assistant)).count();
        if assistant_count != 1 {
            return Err(Error::Template("{assistant} must appear exactly once".into()));
        }
        Ok(Self {
            source: source.to_string(),
            segments,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&source)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Render a conversation. Without an assistant message the text stops
    /// right where the response would begin and the span is empty.
    pub fn apply(&self, system: &str, user: &str, assistant: Option<&str>) -> Rendered {
        let mut text = String::new();
        let mut response = 0..0;
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => text.push_str(t),
                Segment::Slot(Slot::System) => text.push_str(system),
                Segment::Slot(Slot::User) => text.push_str(user),
                Segment::Slot(Slot::Assistant) => {
                    let start = text.len();
                    match assistant {
                        Some(a) => {
                            text.push_str(a);
                            response = start..text.len();
                        }
                        None => {
                            return Rendered {
                                text,
                                response: start..start,
                            }
                        }
                    }
                }
            }
        }
        Rendered { text, response }
    }

    /// Whether the assistant slot closes the template.
    fn ends_with_assistant(&self) -> bool {
        self.segments.last() == Some(&Segment::Slot(Slot::Assistant))
    }

    /// Tokenize a full conversation for teacher-forced training.
    ///
    /// Sequences are `BOS + bytes (+ EOS)` truncated to `max_tokens`. The
    /// mask has one entry per prediction row (`tokens.len() - 1`) and marks
    /// rows whose target lies in the response (plus the closing EOS when the
    /// response ends the template).
    pub fn encode(&self, system: &str, user: &str, assistant: &str, max_tokens: usize) -> Result<EncodedSample> {
        let rendered = self.apply(system, user, Some(assistant));
        let mut tokens = Vec::with_capacity(rendered.text.len() + 2);
        tokens.push(BOS);
        tokens.extend(tokenize(&rendered.text));
        let mut in_response = vec![false; tokens.len()];
        for flag in &mut in_response[1 + rendered.response.start..1 + rendered.response.end] {
            *flag = true;
        }
        if self.ends_with_assistant() {
            tokens.push(EOS);
            in_response.push(true);
        }
        tokens.truncate(max_tokens.max(2));
        in_response.truncate(tokens.len());
        let mask: Vec<f64> = in_response[1..].iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        if !mask.iter().any(|&m| m > 0.0) {
            return Err(Error::DegenerateBatch(
                "response span is empty after templating/truncation".into(),
            ));
        }
        Ok(EncodedSample { tokens, mask })
    }

    /// Prompt tokens (`BOS + rendered prefix`) for generation.
    pub fn encode_prompt(&self, system: &str, user: &str) -> Vec<u32> {
        let rendered = self.apply(system, user, None);
        let mut tokens = vec![BOS];
        tokens.extend(tokenize(&rendered.text));
        tokens
    }
}

/// A tokenized training sequence with its response mask.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub tokens: Vec<u32>,
    /// 0/1 per prediction row; row `i` predicts `tokens[i + 1]`.
    pub mask: Vec<f64>,
}

impl EncodedSample {
    pub fn inputs(&self) -> &[u32] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[u32] {
        &self.tokens[1..]
    }

    /// Prediction rows that belong to the response, in order.
    pub fn response_rows(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::detokenize;

    #[test]
    fn renders_with_response_span() {
        let t = ChatTemplate::parse("S:{system}\nU:{user}\nA:{assistant}").unwrap();
        let r = t.apply("sys", "hi", Some("yo"));
        assert_eq!(r.text, "S:sys\nU:hi\nA:yo");
        assert_eq!(&r.text[r.response.clone()], "yo");

        let r = t.apply("sys", "hi", None);
        assert!(r.text.ends_with("A:"));
        assert!(r.response.is_empty());
    }

    #[test]
    fn rejects_bad_templates() {
        assert!(ChatTemplate::parse("{user} {bogus} {assistant}").is_err());
        assert!(ChatTemplate::parse("{system} {assistant}").is_err());
        assert!(ChatTemplate::parse("{user}").is_err());
        assert!(ChatTemplate::parse("{user} {assistant} {assistant}").is_err());
        assert!(ChatTemplate::parse("{user {assistant}").is_err());
        let escaped = ChatTemplate::parse("{{x}} {user}:{assistant}").unwrap();
        assert_eq!(escaped.apply("", "u", Some("a")).text, "{x} u:a");
    }

    #[test]
    fn mask_marks_exactly_the_response_tokens() {
        let t = ChatTemplate::default();
        let s = t.encode("sys", "héllo", "wörld", 512).unwrap();
        let targets = s.targets();
        let masked: Vec<u32> = s.response_rows().iter().map(|&r| targets[r]).collect();
        assert_eq!(masked.last(), Some(&EOS));
        assert_eq!(detokenize(&masked), "wörld");
        let prompt_rows = s.mask.iter().filter(|&&m| m == 0.0).count();
        assert_eq!(prompt_rows, t.apply("sys", "héllo", None).text.len());
    }

    #[test]
    fn truncation_can_empty_the_response() {
        let t = ChatTemplate::default();
        assert!(t.encode("a long system prompt", "u", "r", 5).is_err());
        let s = t.encode("", "u", "response", 14).unwrap();
        assert_eq!(s.tokens.len(), 14);
        assert_eq!(s.response_rows().len(), 4);
    }
}
