//! Teacher access: OpenAI-compatible API annotation, local-model annotation
//! and the top-k logits export used by white-box distillation.

mod api;
mod export;
mod local;
mod pool;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::records::{InstructionRecord, LabeledRecord};

pub use api::{annotate_api, parse_chat_response, parse_sse_stream, ApiClient, ChatOutcome, RetryPolicy};
pub use export::{export_topk_logits, sequence_budget, topk_of_row, ExportSummary};
pub use local::{annotate_local, LocalTeacher};
pub(crate) use pool::map_ordered;

pub use crate::records::TopKLogitsRecord;

/// API key wrapper whose `Debug`/`Display` never reveal the value.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

impl fmt::Display for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("***")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Api,
    Local,
}

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a helpful assistant.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<Secret>,
    /// Model name sent with API requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub stream: bool,
    pub system_prompt: String,
    pub max_new_tokens: usize,
    /// Sampling temperature; greedy when absent for local teachers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_model_len: Option<usize>,
    /// Maximum in-flight API requests.
    pub concurrency: usize,
    pub retry: RetryPolicy,
    /// Accepted for compatibility with vLLM-style configs and otherwise
    /// ignored.
    #[serde(default, skip_serializing_if = "BackendFlags::is_empty")]
    pub backend: BackendFlags,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendFlags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_memory_utilization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_chunked_prefill: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_remote_code: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enforce_eager: Option<bool>,
}

impl BackendFlags {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

impl InferenceConfig {
    pub fn new(mode: InferenceMode) -> Self {
        Self {
            mode,
            base_url: None,
            api_key: None,
            model: None,
            stream: false,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            max_new_tokens: 512,
            temperature: None,
            seed: 42,
            max_model_len: None,
            concurrency: 4,
            retry: RetryPolicy::default(),
            backend: BackendFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == InferenceMode::Api {
            if self.base_url.as_deref().is_none_or(str::is_empty) {
                return Err(Error::config("inference", "base_url", "required for API inference"));
            }
            if self.api_key.is_none() {
                return Err(Error::config("inference", "api_key", "required for API inference"));
            }
        }
        if let Some(t) = self.temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::config("inference", "temperature", "must be >= 0"));
            }
        }
        if self.concurrency == 0 {
            return Err(Error::config("inference", "concurrency", "must be at least 1"));
        }
        Ok(())
    }

    /// Stable digest of the settings that influence teacher outputs. The API
    /// key is excluded.
    pub fn content_hash(&self) -> String {
        let mut redacted = self.clone();
        redacted.api_key = None;
        let bytes = serde_json::to_vec(&redacted).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// One prompt sent to a teacher. `id` seeds sampling for local teachers so
/// results do not depend on scheduling.
#[derive(Clone, Copy, Debug)]
pub struct TeacherRequest<'a> {
    pub system: &'a str,
    pub user: &'a str,
    pub id: u64,
}

/// Anything that can answer a chat prompt: an API endpoint, a local model,
/// or a scripted mock.
pub trait TeacherClient: Sync {
    fn complete(&self, request: &TeacherRequest<'_>) -> Result<String>;

    /// Identifies the teacher configuration in provenance records.
    fn config_hash(&self) -> String;
}

impl<F> TeacherClient for F
where
    F: Fn(&TeacherRequest<'_>) -> Result<String> + Sync,
{
    fn complete(&self, request: &TeacherRequest<'_>) -> Result<String> {
        self(request)
    }

    fn config_hash(&self) -> String {
        "closure".to_string()
    }
}

/// Outcome of labeling one instruction.
#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    Labeled(LabeledRecord),
    Failed { index: usize, instruction: String, error: String },
}

impl Annotation {
    pub fn labeled(&self) -> Option<&LabeledRecord> {
        match self {
            Annotation::Labeled(r) => Some(r),
            Annotation::Failed { .. } => None,
        }
    }
}

/// Label every instruction with `client`, keeping input order. Per-record
/// failures become [`Annotation::Failed`]; authentication errors abort.
pub fn annotate_with(
    instructions: &[InstructionRecord],
    client: &dyn TeacherClient,
    system_prompt: &str,
    concurrency: usize,
) -> Result<Vec<Annotation>> {
    let results = map_ordered(instructions, concurrency, |i, rec| {
        let request = TeacherRequest {
            system: system_prompt,
            user: &rec.instruction,
            id: i as u64,
        };
        match client.complete(&request) {
            Err(e @ Error::Auth { .. }) => Err(e),
            Ok(output) if !output.trim().is_empty() => Ok(Annotation::Labeled(LabeledRecord::new(&rec.instruction, output))),
            Ok(_) => Ok(Annotation::Failed {
                index: i,
                instruction: rec.instruction.clone(),
                error: "teacher returned an empty response".into(),
            }),
            Err(e) => Ok(Annotation::Failed {
                index: i,
                instruction: rec.instruction.clone(),
                error: e.to_string(),
            }),
        }
    })?;
    for a in &results {
        if let Annotation::Failed { index, error, .. } = a {
            log::warn!("instruction {index} left unlabeled: {error}");
        }
    }
    Ok(results)
}
