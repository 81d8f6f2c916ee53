//! Dataset rows exchanged between pipeline stages and their file formats.
//!
//! Instruction, labeled, preference and CoT datasets are JSON arrays; teacher
//! logits are JSON Lines with one [`TopKLogitsRecord`] per sample.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a synthesized record came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub operator: String,
    pub seed_id: usize,
    pub teacher_config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl InstructionRecord {
    pub fn new(instruction: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            provenance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub instruction: String,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl LabeledRecord {
    pub fn new(instruction: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            output: output.into(),
            provenance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub instruction: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub instruction: String,
    pub reasoning: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Teacher top-k log-probabilities at one response position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKPosition {
    pub target_token: u32,
    /// `(token_id, logprob)` sorted by non-increasing logprob.
    pub topk: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKLogitsRecord {
    pub sample_index: usize,
    pub positions: Vec<TopKPosition>,
}

pub trait Validate {
    fn validate(&self) -> Result<()>;
}

fn non_empty(what: &str, s: &str) -> Result<()> {
    if s.trim().is_empty() {
        Err(Error::Contract(format!("{what} must be non-empty")))
    } else {
        Ok(())
    }
}

impl Validate for InstructionRecord {
    fn validate(&self) -> Result<()> {
        non_empty("instruction", &self.instruction)
    }
}

impl Validate for LabeledRecord {
    fn validate(&self) -> Result<()> {
        non_empty("instruction", &self.instruction)?;
        non_empty("output", &self.output)
    }
}

impl Validate for PreferenceRecord {
    /// Identical chosen/rejected pairs are allowed here; trainers skip them.
    fn validate(&self) -> Result<()> {
        non_empty("instruction", &self.instruction)?;
        non_empty("chosen", &self.chosen)?;
        non_empty("rejected", &self.rejected)
    }
}

impl Validate for CoTRecord {
    fn validate(&self) -> Result<()> {
        non_empty("instruction", &self.instruction)?;
        non_empty("reasoning", &self.reasoning)
    }
}

impl Validate for TopKLogitsRecord {
    fn validate(&self) -> Result<()> {
        for (p, pos) in self.positions.iter().enumerate() {
            let bad = |m: String| {
                Err(Error::Alignment {
                    sample_index: self.sample_index,
                    message: format!("position {p}: {m}"),
                })
            };
            if pos.topk.is_empty() {
                return bad("empty top-k list".into());
            }
            let mut ids: Vec<u32> = pos.topk.iter().map(|&(id, _)| id).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return bad("duplicate token ids".into());
            }
            if pos.topk.iter().any(|&(_, lp)| !lp.is_finite() || lp > 1e-9) {
                return bad("logprob must be finite and <= 0".into());
            }
            if pos.topk.windows(2).any(|w| w[1].1 > w[0].1) {
                return bad("logprobs not sorted in non-increasing order".into());
            }
            let mass: f64 = pos.topk.iter().map(|&(_, lp)| lp.exp()).sum();
            if mass > 1.0 + 1e-6 {
                return bad(format!("probability mass {mass} exceeds 1"));
            }
        }
        Ok(())
    }
}

/// Parse a JSON array of records, validating each one.
pub fn parse_json_array<T: DeserializeOwned + Validate>(bytes: &[u8], origin: &Path) -> Result<Vec<T>> {
    let records: Vec<T> = serde_json::from_slice(bytes).map_err(|e| Error::json(origin, e))?;
    for (i, r) in records.iter().enumerate() {
        r.validate().map_err(|e| Error::Contract(format!("{}: record {i}: {e}", origin.display())))?;
    }
    Ok(records)
}

pub fn read_json_array<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_json_array(&bytes, path)
}

pub fn write_json_array<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(records).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Decode one line of a logits file.
pub fn parse_topk_line(line: &str) -> Result<TopKLogitsRecord> {
    let record: TopKLogitsRecord =
        serde_json::from_str(line).map_err(|e| Error::json("<logits line>", e))?;
    record.validate()?;
    Ok(record)
}

/// Streaming writer for JSON Lines logits files.
pub struct TopKWriter {
    out: BufWriter<fs::File>,
    path: std::path::PathBuf,
}

impl TopKWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &TopKLogitsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::json(&self.path, e))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_topk_file(path: &Path) -> Result<Vec<TopKLogitsRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_topk_line(&line)?);
    }
    Ok(out)
}
