//! Training objectives: masked cross-entropy, forward/reverse KL, top-k
//! approximated KL, the mixed KD loss, DPO, Bradley–Terry reward loss and
//! the GRPO clipped surrogate.
//!
//! All losses are built on a [`Tape`](crate::numerics::Tape) so trainers
//! get gradients for free. Divergences are token means over the compared
//! positions.

mod grpo;
mod kd;
mod preference;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grpo::{grpo_advantages, grpo_loss, kl_penalty, GroupRollout, ADVANTAGE_EPS};
pub use kd::{
    combined_kd_loss, divergence_rows, forward_kld, reverse_kld, sft_loss, token_logprobs, topk_kld,
    TEACHER_PROB_FLOOR,
};
pub use preference::{dpo_loss, reward_model_loss};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillationType {
    ForwardKld,
    ReverseKld,
}

impl DistillationType {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward_kld" => Some(Self::ForwardKld),
            "reverse_kld" => Some(Self::ReverseKld),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ForwardKld => "forward_kld",
            Self::ReverseKld => "reverse_kld",
        }
    }
}

/// White-box distillation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSpec {
    pub kd_ratio: f64,
    pub distillation_type: DistillationType,
    /// Teacher logits kept per position; 0 keeps the full vocabulary.
    pub top_k: usize,
    pub max_seq_length: usize,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            kd_ratio: 0.5,
            distillation_type: DistillationType::ForwardKld,
            top_k: 10,
            max_seq_length: 512,
        }
    }
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kd_ratio) {
            return Err(Error::config("distillation", "kd_ratio", format!("{} is outside [0, 1]", self.kd_ratio)));
        }
        if self.max_seq_length < 2 {
            return Err(Error::config("distillation", "max_seq_length", "must be at least 2"));
        }
        Ok(())
    }

    /// Effective k for a vocabulary of `vocab` tokens.
    pub fn effective_k(&self, vocab: usize) -> usize {
        if self.top_k == 0 {
            vocab
        } else {
            self.top_k.min(vocab)
        }
    }
}
