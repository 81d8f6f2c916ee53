use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::ModelConfig(m));
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len {} < 2", self.max_seq_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.out.weight"), vec![d, d]),
                (p("attn.out.bias"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc.weight"), vec![d, f]),
                (p("mlp.fc.bias"), vec![f]),
                (p("mlp.proj.weight"), vec![f, d]),
                (p("mlp.proj.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".to_string(), vec![d]),
            ("ln_f.bias".to_string(), vec![d]),
            ("unembed".to_string(), vec![d, v]),
        ]);
        out
    }
}

pub(crate) const PARAMS_PER_LAYER: usize = 12;
