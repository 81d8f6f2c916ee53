//! Optimization and the training loops for every job type.
//!
//! All loops share one engine: samples are grouped into optimizer steps of
//! `per_device_train_batch_size × gradient_accumulation_steps`, each sample's
//! loss is a per-token mean, and a step's gradient is the mean of the
//! per-sample gradients summed in fixed order. Microbatch boundaries
//! therefore never change the arithmetic.

mod engine;
mod grpo;
mod optim;
mod preference;
mod sft;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ChatTemplate, EncodedSample, ModelConfig};

pub use engine::{SampleOutput, Trainable};
pub use grpo::{train_grpo, ContainsReward, GrpoConfig, ModelReward, RewardFn};
pub use optim::{lr_at, optimizer_step, warmup_steps, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use preference::{
    dpo_accuracy, load_reward_model, reward_accuracy, train_dpo, train_reward_model, RewardModel,
};
pub use sft::{heldout_ce, train_sft, train_white_box};

pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedulerType {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub output_dir: PathBuf,
    pub num_train_epochs: usize,
    pub per_device_train_batch_size: usize,
    pub gradient_accumulation_steps: usize,
    pub save_steps: usize,
    pub logging_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub lr_scheduler_type: LrSchedulerType,
    pub seed: u64,
    /// A `checkpoints/step-N` directory to continue from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_from_checkpoint: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("result/"),
            num_train_epochs: 3,
            per_device_train_batch_size: 1,
            gradient_accumulation_steps: 8,
            save_steps: 1000,
            logging_steps: 1,
            learning_rate: 2e-5,
            weight_decay: 0.05,
            warmup_ratio: 0.1,
            lr_scheduler_type: LrSchedulerType::Cosine,
            seed: 42,
            resume_from_checkpoint: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_train_epochs", self.num_train_epochs),
            ("per_device_train_batch_size", self.per_device_train_batch_size),
            ("gradient_accumulation_steps", self.gradient_accumulation_steps),
            ("save_steps", self.save_steps),
            ("logging_steps", self.logging_steps),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::config("training", key, "must be at least 1"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("training", "learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("training", "weight_decay", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("training", "warmup_ratio", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Samples per optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.per_device_train_batch_size * self.gradient_accumulation_steps
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.effective_batch())
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.num_train_epochs * self.steps_per_epoch(samples)
    }

    /// Hyperparameters without filesystem locations, for run manifests.
    pub fn portable(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("training config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("resume_from_checkpoint");
        }
        v
    }
}

/// How records become token sequences: chat template, system prompt and
/// token budget.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFormat {
    pub template: ChatTemplate,
    pub system_prompt: String,
    pub max_seq_length: usize,
}

impl SequenceFormat {
    pub fn new(template: ChatTemplate, system_prompt: impl Into<String>, max_seq_length: usize) -> Self {
        Self {
            template,
            system_prompt: system_prompt.into(),
            max_seq_length,
        }
    }

    /// Teacher-forced encoding whose inputs fit the model window.
    pub fn encode(&self, config: &ModelConfig, instruction: &str, response: &str) -> Result<EncodedSample> {
        let budget = self.max_seq_length.min(config.max_seq_len + 1);
        self.template.encode(&self.system_prompt, instruction, response, budget)
    }

    /// Full-sequence encoding (tokens, not inputs, fit the window).
    pub fn encode_full(&self, config: &ModelConfig, instruction: &str, response: &str) -> Result<EncodedSample> {
        let budget = self.max_seq_length.min(config.max_seq_len);
        self.template.encode(&self.system_prompt, instruction, response, budget)
    }

    /// Generation prompt, keeping the tail so at least one token fits.
    pub fn prompt(&self, config: &ModelConfig, instruction: &str) -> Vec<u32> {
        let p = self.template.encode_prompt(&self.system_prompt, instruction);
        let keep = config.max_seq_len.saturating_sub(1).max(1);
        if p.len() > keep {
            p[p.len() - keep..].to_vec()
        } else {
            p
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: usize,
    /// Relative to the output directory.
    pub path: PathBuf,
}

/// Append-only record of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub job: String,
    pub config: serde_json::Value,
    pub dataset_hash: String,
    pub seed: u64,
    pub total_steps: usize,
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl RunManifest {
    /// Mean step loss for each epoch that has at least one step.
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in &self.steps {
            let e = sums.entry(s.epoch).or_default();
            e.0 += s.loss;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }

    /// Steps that were emitted to the metrics log.
    pub fn logged_steps(&self, logging_steps: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.step % logging_steps == 0)
    }
}

/// Git-style content hash: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub(crate) fn dataset_hash<T: Serialize>(records: &[T]) -> String {
    content_hash(&serde_json::to_vec(records).expect("records serialize"))
}
