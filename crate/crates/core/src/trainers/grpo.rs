use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::engine::{batch_gradient, SampleOutput, Session};
use super::preference::RewardModel;
use super::{dataset_hash, RunManifest, SequenceFormat, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::{tokenizer, TinyLM};
use crate::numerics::{Tape, Var};
use crate::objectives::{grpo_advantages, grpo_loss, kl_penalty, token_logprobs, GroupRollout};
use crate::records::InstructionRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Completions sampled per prompt (G).
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    /// Optimizer steps; each samples fresh groups.
    pub iterations: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_eps: 0.2,
            kl_coeff: 0.04,
            iterations: 50,
            temperature: 1.0,
            max_new_tokens: 16,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("grpo", "group_size", "must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("grpo", "clip_eps", "must lie in (0, 1)"));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::config("grpo", "kl_coeff", "must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(Error::config("grpo", "iterations", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("grpo", "temperature", "must be positive"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("grpo", "max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

/// Scores a completion for a prompt.
pub trait RewardFn: Sync {
    fn score(&self, prompt: &str, completion: &str) -> Result<f64>;
}

impl<F> RewardFn for F
where
    F: Fn(&str, &str) -> Result<f64> + Sync,
{
    fn score(&self, prompt: &str, completion: &str) -> Result<f64> {
        self(prompt, completion)
    }
}

/// 1 when the completion contains `target`, else 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainsReward {
    pub target: String,
}

impl RewardFn for ContainsReward {
    fn score(&self, _prompt: &str, completion: &str) -> Result<f64> {
        Ok(if completion.contains(&self.target) { 1.0 } else { 0.0 })
    }
}

/// A trained reward model applied to the templated prompt and completion.
pub struct ModelReward {
    pub model: RewardModel,
    pub format: SequenceFormat,
}

impl RewardFn for ModelReward {
    fn score(&self, prompt: &str, completion: &str) -> Result<f64> {
        let s = self.format.encode_full(self.model.backbone.config(), prompt, completion)?;
        self.model.score(&s.tokens)
    }
}

/// Log-probs of each completion token given the prompt, shape `[len]`.
fn completion_logprobs(model: &TinyLM, tape: &mut Tape, params: &[Var], prompt: &[u32], completion: &[u32]) -> Result<Var> {
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(completion);
    let out = model.forward_on(tape, params, &seq[..seq.len() - 1])?;
    let rows: Vec<usize> = (prompt.len() - 1..seq.len() - 1).collect();
    token_logprobs(tape, out.logits, &rows, &seq[1..])
}

fn frozen_logprobs(model: &TinyLM, prompt: &[u32], completion: &[u32]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false)?;
    let v = completion_logprobs(model, &mut tape, &params, prompt, completion)?;
    Ok(tape.value(v).data().to_vec())
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Rollout {
    group: GroupRollout,
    reference: Vec<Vec<f64>>,
}

fn rollout(
    policy: &TinyLM,
    reference: &TinyLM,
    instruction: &str,
    reward: &dyn RewardFn,
    grpo: &GrpoConfig,
    format: &SequenceFormat,
    seed: u64,
) -> Result<Rollout> {
    let prompt = format.prompt(policy.config(), instruction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut completions = Vec::with_capacity(grpo.group_size);
    let mut rewards = Vec::with_capacity(grpo.group_size);
    for _ in 0..grpo.group_size {
        let g = policy.generate_with_rng(&prompt, grpo.temperature, grpo.max_new_tokens, &mut rng)?;
        let text = tokenizer::detokenize(g.content());
        let r = reward
            .score(instruction, &text)
            .map_err(|e| Error::Reward(format!("scoring a completion for {instruction:?}: {e}")))?;
        if !r.is_finite() {
            return Err(Error::Reward(format!("non-finite reward {r}")));
        }
        rewards.push(r);
        completions.push(g.tokens);
    }
    let old_logprobs = completions
        .iter()
        .map(|c| frozen_logprobs(policy, &prompt, c))
        .collect::<Result<Vec<_>>>()?;
    let reference = completions
        .iter()
        .map(|c| frozen_logprobs(reference, &prompt, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout {
        group: GroupRollout {
            prompt,
            completions,
            rewards,
            old_logprobs,
        },
        reference,
    })
}

/// Group relative policy optimization with a clipped surrogate and a KL
/// penalty toward a frozen reference (a copy of the initial policy unless
/// given). Every iteration samples `group_size` completions for each of
/// `effective_batch` prompts and takes one optimizer step.
pub fn train_grpo(
    student: &mut TinyLM,
    reference: Option<&TinyLM>,
    prompts: &[InstructionRecord],
    reward: &dyn RewardFn,
    grpo: &GrpoConfig,
    cfg: &TrainingConfig,
    format: &SequenceFormat,
) -> Result<RunManifest> {
    grpo.validate()?;
    if prompts.is_empty() {
        return Err(Error::EmptyDataset("no prompts for GRPO".into()));
    }
    let frozen;
    let reference = match reference {
        Some(r) => r,
        None => {
            frozen = student.clone();
            &frozen
        }
    };
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let batch = cfg.effective_batch();
    let mut session = Session::start(
        "grpo",
        cfg,
        student,
        grpo.iterations,
        json!({"training": cfg.portable(), "grpo": grpo, "template": format.template.source()}),
        dataset_hash(prompts),
    )?;
    for it in session.step()..grpo.iterations {
        let step = it + 1;
        let slots: Vec<usize> = (0..batch).map(|b| order[(it * batch + b) % order.len()]).collect();
        let policy: &TinyLM = student;
        let rollouts = slots
            .par_iter()
            .enumerate()
            .map(|(b, &p)| {
                rollout(
                    policy,
                    reference,
                    &prompts[p].instruction,
                    reward,
                    grpo,
                    format,
                    mix(cfg.seed, it as u64, b as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut mean_reward = 0.0;
        let mut adv_mean = 0.0f64;
        let (mut kl_sum, mut kl_tokens) = (0.0, 0usize);
        for r in &rollouts {
            let g = &r.group;
            mean_reward += g.rewards.iter().sum::<f64>() / g.rewards.len() as f64;
            let adv = grpo_advantages(&g.rewards)?;
            if adv.iter().all(|&a| a == 0.0) {
                log::warn!("grpo step {step}: identical rewards within a group, advantages are zero");
            }
            adv_mean = adv_mean.max((adv.iter().sum::<f64>() / adv.len() as f64).abs());
            for (old, reference) in g.old_logprobs.iter().zip(&r.reference) {
                for (&p, &q) in old.iter().zip(reference) {
                    kl_sum += kl_penalty(p, q);
                    kl_tokens += 1;
                }
            }
        }
        mean_reward /= rollouts.len() as f64;

        let mut grad = batch_gradient(&*student, &rollouts, &|m: &TinyLM, tape: &mut Tape, params: &[Var], r: &Rollout| {
            let g = &r.group;
            let lps = g
                .completions
                .iter()
                .map(|c| completion_logprobs(m, tape, params, &g.prompt, c))
                .collect::<Result<Vec<_>>>()?;
            let loss = grpo_loss(tape, g, &lps, &r.reference, grpo.clip_eps, grpo.kl_coeff)?;
            Ok(SampleOutput { loss, metrics: vec![] })
        })
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step },
            other => other,
        })?;
        grad.metrics.insert("reward".into(), mean_reward);
        grad.metrics.insert("kl".into(), kl_sum / kl_tokens.max(1) as f64);
        grad.metrics.insert("advantage_mean_abs".into(), adv_mean);
        session.apply(student, grad, 0)?;
    }
    session.finish(student)
}
