//! On-disk checkpoints: `config.json`, `index.json` (name → shape) and one
//! little-endian `f64` blob per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::tinylm::{Param, TinyLM};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CONFIG_FILE: &str = "config.json";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub fn encode_blob(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_blob(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Contract(format!("shape {shape:?} overflows")))?;
    if numel.checked_mul(8) != Some(bytes.len()) {
        return Err(Error::Contract(format!(
            "blob of {} bytes does not hold shape {shape:?}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "decode_blob" });
    }
    Tensor::new(shape.to_vec(), data)
}

/// Parse and validate an index. Entry names become file names, so they are
/// restricted to `[A-Za-z0-9._-]` and may not start with a dot.
pub fn parse_index(bytes: &[u8]) -> Result<Vec<IndexEntry>> {
    let entries: Vec<IndexEntry> =
        serde_json::from_slice(bytes).map_err(|e| Error::json(INDEX_FILE, e))?;
    for e in &entries {
        for s in [&e.name, &e.file] {
            let ok = !s.is_empty()
                && !s.starts_with('.')
                && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
            if !ok {
                return Err(Error::Contract(format!("invalid checkpoint entry name {s:?}")));
            }
        }
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(Error::Contract(format!("invalid shape {:?} for {}", e.shape, e.name)));
        }
    }
    Ok(entries)
}

/// Write named tensors (blobs + index) into `dir`.
pub fn save_tensors<'a>(dir: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for (name, t) in tensors {
        let file = format!("{name}.bin");
        let path = dir.join(&file);
        fs::write(&path, encode_blob(t.data())).map_err(|e| Error::io(&path, e))?;
        index.push(IndexEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    write_json(&dir.join(INDEX_FILE), &index)
}

pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let index_path = dir.join(INDEX_FILE);
    let bytes = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    parse_index(&bytes)?
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let blob = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            Ok((e.name, decode_blob(&blob, &e.shape)?))
        })
        .collect()
}

pub fn save_model(model: &TinyLM, dir: &Path) -> Result<()> {
    save_tensors(dir, model.params().iter().map(|p| (p.name.as_str(), &p.tensor)))?;
    write_json(&dir.join(CONFIG_FILE), model.config())
}

/// Read only the architecture of a checkpoint.
pub fn load_model_config(dir: &Path) -> Result<ModelConfig> {
    let config_path = dir.join(CONFIG_FILE);
    let text = fs::read(&config_path).map_err(|e| Error::io(&config_path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::json(&config_path, e))
}

pub fn load_model(dir: &Path) -> Result<TinyLM> {
    let config = load_model_config(dir)?;
    let params = load_tensors(dir)?
        .into_iter()
        .map(|(name, tensor)| Param { name, tensor })
        .collect();
    TinyLM::from_params(config, params)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
