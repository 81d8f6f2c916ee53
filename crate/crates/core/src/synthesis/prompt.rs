use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// Prompt text with `{name}` slots; `{{` and `}}` are literal braces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Parse `source`, requiring every slot in `required` and allowing only
    /// slots in `required` or `optional`.
    pub fn parse(source: &str, required: &[&str], optional: &[&str]) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(c) if c.is_ascii_alphanumeric() || c == '_' => name.push(c),
                            _ => return Err(Error::Template(format!("unterminated or invalid slot after {{{name}"))),
                        }
                    }
                    if !required.contains(&name.as_str()) && !optional.contains(&name.as_str()) {
                        return Err(Error::Template(format!("unknown slot {{{name}}}")));
                    }
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(name));
                }
                '}' => return Err(Error::Template("unmatched '}' (write '}}' for a literal brace)".into())),
                c => text.push(c),
            }
        }
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        for r in required {
            if !pieces.iter().any(|p| matches!(p, Piece::Slot(s) if s == r)) {
                return Err(Error::Template(format!("missing required slot {{{r}}}")));
            }
        }
        Ok(Self {
            source: source.to_string(),
            pieces,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Fill slots from `values`; slots without a value render empty.
    pub fn render(&self, values: &BTreeMap<&str, &str>) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            match p {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(values.get(s.as_str()).copied().unwrap_or("")),
            }
        }
        out
    }
}
