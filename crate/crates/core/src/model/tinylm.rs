//! Pre-norm decoder-only transformer with learned positional embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::config::{ModelConfig, PARAMS_PER_LAYER};
use super::tokenizer::EOS;
use crate::error::{Error, Result};
use crate::numerics::{softmax_into, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Output of one teacher-forced pass.
pub struct ForwardOutput {
    /// `[T × vocab]`
    pub logits: Var,
    /// Final-norm hidden states, `[T × d_model]`.
    pub hidden: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationOptions {
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Sampled tokens, including the terminating EOS when one was drawn.
    pub tokens: Vec<u32>,
    pub stopped_at_eos: bool,
}

impl Generation {
    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        if self.stopped_at_eos {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

impl TinyLM {
    /// Weights ~ N(0, 0.02), norm gains 1, biases 0; deterministic per seed.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; numel]
                } else if name.ends_with(".bias") {
                    vec![0.0; numel]
                } else {
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data).map(|tensor| Param { name, tensor })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    /// Assemble a model from named parameters, checking them against the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::ModelConfig(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.tensor.shape() {
                return Err(Error::ModelConfig(format!(
                    "parameter {} {:?} does not match layout entry {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Overwrite parameter data in layout order.
    pub fn set_param_data(&mut self, index: usize, data: Vec<f64>) -> Result<()> {
        let p = &mut self.params[index];
        p.tensor = Tensor::new(p.tensor.shape().to_vec(), data)?;
        Ok(())
    }

    /// Mutable parameter buffers in layout order.
    pub(crate) fn param_data_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|p| p.tensor.data_mut()).collect()
    }

    /// Record every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(requires_grad)))
            .collect()
    }

    /// Teacher-forced pass over `tokens` using parameters bound on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], tokens: &[u32]) -> Result<ForwardOutput> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Contract("forward on an empty sequence".into()));
        }
        if tokens.len() > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: c.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: c.vocab_size,
            });
        }
        let t_len = tokens.len();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..t_len).collect();
        let tok = tape.embedding(params[0], &ids)?;
        let pos = tape.embedding(params[1], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..c.n_layers {
            let p = &params[2 + l * PARAMS_PER_LAYER..2 + (l + 1) * PARAMS_PER_LAYER];
            let h = tape.layer_norm(x, p[0], p[1])?;
            let qkv = tape.matmul(h, p[2])?;
            let qkv = tape.add(qkv, p[3])?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for head in 0..c.n_heads {
                let q = tape.slice_cols(qkv, head * hd, hd)?;
                let k = tape.slice_cols(qkv, c.d_model + head * hd, hd)?;
                let v = tape.slice_cols(qkv, 2 * c.d_model + head * hd, hd)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(attn, v)?);
            }
            let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = tape.matmul(merged, p[4])?;
            let o = tape.add(o, p[5])?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, p[6], p[7])?;
            let m = tape.matmul(h, p[8])?;
            let m = tape.add(m, p[9])?;
            let m = tape.gelu(m)?;
            let m = tape.matmul(m, p[10])?;
            let m = tape.add(m, p[11])?;
            x = tape.add(x, m)?;
        }
        let n = params.len();
        let hidden = tape.layer_norm(x, params[n - 3], params[n - 2])?;
        let logits = tape.matmul(hidden, params[n - 1])?;
        Ok(ForwardOutput { logits, hidden })
    }

    /// Logits `[T × vocab]` for one sequence, without gradient tracking.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false)?;
        let out = self.forward_on(&mut tape, &params, tokens)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Independent forwards over a batch of sequences.
    pub fn forward_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<Tensor>> {
        batch.par_iter().map(|seq| self.forward(seq)).collect()
    }

    /// Autoregressive sampling from `softmax(logits / temperature)`;
    /// temperature 0 is greedy. Stops at EOS, after `max_new_tokens`, or when
    /// the context window is full.
    pub fn generate(&self, prompt: &[u32], opts: &GenerationOptions) -> Result<Generation> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        self.generate_with_rng(prompt, opts.temperature, opts.max_new_tokens, &mut rng)
    }

    pub fn generate_with_rng<R: Rng>(
        &self,
        prompt: &[u32],
        temperature: f64,
        max_new_tokens: usize,
        rng: &mut R,
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(Error::Contract("generate requires a non-empty prompt".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!("temperature must be >= 0, got {temperature}")));
        }
        let mut seq = prompt.to_vec();
        let mut tokens = Vec::new();
        let mut probs = vec![0.0; self.config.vocab_size];
        while tokens.len() < max_new_tokens && seq.len() < self.config.max_seq_len {
            let logits = self.forward(&seq)?;
            let last = logits.row(logits.rows() - 1);
            let next = if temperature == 0.0 {
                argmax(last)
            } else {
                let scaled: Vec<f64> = last.iter().map(|v| v / temperature).collect();
                softmax_into(&scaled, &mut probs);
                sample_categorical(&probs, rng)
            };
            tokens.push(next);
            seq.push(next);
            if next == EOS {
                return Ok(Generation {
                    tokens,
                    stopped_at_eos: true,
                });
            }
        }
        Ok(Generation {
            tokens,
            stopped_at_eos: false,
        })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // rounding left u beyond the cumulative total
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}
