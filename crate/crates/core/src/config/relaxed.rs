//! JSON reader that also accepts the abbreviations found in hand-written
//! job configs: `...` standing for omitted members, and object members
//! separated by a line break instead of a comma.

use serde_json::{Map, Value};

use crate::error::{Error, Result};

const MAX_DEPTH: usize = 64;

/// A parsed document plus the JSON pointers of objects that contained `...`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedDocument {
    pub value: Value,
    pub ellipsized: Vec<String>,
    /// Positions (line, column) where a comma was inferred.
    pub inferred_commas: Vec<(usize, usize)>,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    ellipsized: Vec<String>,
    inferred_commas: Vec<(usize, usize)>,
}

pub fn parse_relaxed(src: &str) -> Result<RelaxedDocument> {
    let mut p = Parser {
        src,
        pos: 0,
        ellipsized: Vec::new(),
        inferred_commas: Vec::new(),
    };
    p.skip_ws();
    let value = p.value("", 0)?;
    p.skip_ws();
    if p.pos < src.len() {
        return Err(p.error("trailing characters after the document"));
    }
    Ok(RelaxedDocument {
        value,
        ellipsized: p.ellipsized,
        inferred_commas: p.inferred_commas,
    })
}

fn escape_pointer(key: &str) -> String {
    key.replace('~', "~0").replace('/', "~1")
}

impl<'a> Parser<'a> {
    fn line_col(&self, pos: usize) -> (usize, usize) {
        let mut pos = pos.min(self.src.len());
        while !self.src.is_char_boundary(pos) {
            pos -= 1;
        }
        let before = &self.src[..pos];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
        (line, column)
    }

    fn error(&self, message: impl Into<String>) -> Error {
        let (line, column) = self.line_col(self.pos);
        Error::Syntax {
            line,
            column,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.as_bytes().get(self.pos).copied()
    }

    /// Skip whitespace; returns whether a line break was crossed.
    fn skip_ws(&mut self) -> bool {
        let mut newline = false;
        while let Some(c) = self.peek() {
            match c {
                b'\n' => newline = true,
                b' ' | b'\t' | b'\r' => {}
                _ => break,
            }
            self.pos += 1;
        }
        newline
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.src[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn value(&mut self, path: &str, depth: usize) -> Result<Value> {
        if depth > MAX_DEPTH {
            return Err(self.error("nesting too deep"));
        }
        match self.peek() {
            Some(b'{') => self.object(path, depth),
            Some(b'[') => self.array(path, depth),
            Some(b'"') => self.string().map(Value::String),
            Some(b't') if self.eat("true") => Ok(Value::Bool(true)),
            Some(b'f') if self.eat("false") => Ok(Value::Bool(false)),
            Some(b'n') if self.eat("null") => Ok(Value::Null),
            Some(c) if c == b'-' || c.is_ascii_digit() => self.number(),
            Some(_) => Err(self.error("expected a value")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn string(&mut self) -> Result<String> {
        let start = self.pos;
        self.pos += 1;
        loop {
            match self.peek() {
                None => return Err(self.error("unterminated string")),
                Some(b'"') => break,
                Some(b'\\') => self.pos += 2,
                Some(c) if c < 0x20 => return Err(self.error("control character in string")),
                Some(_) => self.pos += 1,
            }
        }
        self.pos += 1;
        if self.pos > self.src.len() {
            return Err(self.error("unterminated string"));
        }
        let raw = &self.src[start..self.pos];
        serde_json::from_str::<String>(raw).map_err(|e| {
            let (line, column) = self.line_col(start);
            Error::Syntax {
                line,
                column,
                message: format!("invalid string: {e}"),
            }
        })
    }

    fn number(&mut self) -> Result<Value> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() || matches!(c, b'-' | b'+' | b'.' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let lexeme = &self.src[start..self.pos];
        match serde_json::from_str::<Value>(lexeme) {
            Ok(v @ Value::Number(_)) => Ok(v),
            _ => {
                self.pos = start;
                Err(self.error(format!("invalid number {lexeme:?}")))
            }
        }
    }

    fn ellipsis(&mut self) -> bool {
        self.eat("...") || self.eat("\u{2026}")
    }

    fn object(&mut self, path: &str, depth: usize) -> Result<Value> {
        self.pos += 1;
        let mut map = Map::new();
        let mut elided = false;
        let mut need_sep = false;
        loop {
            let newline = self.skip_ws();
            match self.peek() {
                Some(b'}') => {
                    self.pos += 1;
                    break;
                }
                Some(b',') if need_sep => {
                    self.pos += 1;
                    need_sep = false;
                    continue;
                }
                None => return Err(self.error("unterminated object")),
                _ if need_sep => {
                    if !newline {
                        return Err(self.error("expected ',' or '}'"));
                    }
                    self.inferred_commas.push(self.line_col(self.pos));
                }
                _ => {}
            }
            if self.ellipsis() {
                elided = true;
                need_sep = true;
                continue;
            }
            if self.peek() != Some(b'"') {
                return Err(self.error("expected a quoted key"));
            }
            let key = self.string()?;
            self.skip_ws();
            if !self.eat(":") {
                return Err(self.error("expected ':' after key"));
            }
            self.skip_ws();
            let child = format!("{path}/{}", escape_pointer(&key));
            let v = self.value(&child, depth + 1)?;
            if map.insert(key.clone(), v).is_some() {
                log::warn!("duplicate key {child}; the last value wins");
            }
            need_sep = true;
        }
        if elided {
            self.ellipsized.push(path.to_string());
        }
        Ok(Value::Object(map))
    }

    fn array(&mut self, path: &str, depth: usize) -> Result<Value> {
        self.pos += 1;
        let mut items = Vec::new();
        let mut need_sep = false;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b']') => {
                    self.pos += 1;
                    break;
                }
                Some(b',') if need_sep => {
                    self.pos += 1;
                    need_sep = false;
                    continue;
                }
                None => return Err(self.error("unterminated array")),
                _ if need_sep => return Err(self.error("expected ',' or ']'")),
                _ => {}
            }
            let child = format!("{path}/{}", items.len());
            items.push(self.value(&child, depth + 1)?);
            need_sep = true;
        }
        Ok(Value::Array(items))
    }
}
