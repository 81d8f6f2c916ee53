use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use super::engine::{run_epochs, SampleOutput, Session, Trainable};
use super::{dataset_hash, RunManifest, SequenceFormat, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_tensors, save_tensors};
use crate::model::{load_model, save_model, EncodedSample, TinyLM};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::{dpo_loss, reward_model_loss, token_logprobs};
use crate::records::PreferenceRecord;

const HEAD_DIR: &str = "reward_head";

/// Pairwise accuracy credit: ties count as half.
fn win(margin: f64) -> f64 {
    if margin > 0.0 {
        1.0
    } else if margin == 0.0 {
        0.5
    } else {
        0.0
    }
}

/// Encode preference pairs; degenerate or truncated pairs are skipped with
/// a warning.
fn encode_pairs<E>(data: &[PreferenceRecord], encode: E) -> Result<Vec<(EncodedSample, EncodedSample)>>
where
    E: Fn(&str, &str) -> Result<EncodedSample>,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset("no preference pairs".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for (i, p) in data.iter().enumerate() {
        if p.chosen == p.rejected {
            log::warn!("skipping pair {i}: chosen and rejected responses are identical");
            continue;
        }
        match (encode(&p.instruction, &p.chosen), encode(&p.instruction, &p.rejected)) {
            (Ok(c), Ok(r)) => out.push((c, r)),
            (Err(Error::DegenerateBatch(msg)), _) | (_, Err(Error::DegenerateBatch(msg))) => {
                log::warn!("skipping pair {i}: {msg}")
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no usable preference pairs".into()));
    }
    Ok(out)
}

/// Summed response log-probability of one encoded sample, shape `[1]`.
fn response_logprob(model: &TinyLM, tape: &mut Tape, params: &[Var], s: &EncodedSample) -> Result<Var> {
    let out = model.forward_on(tape, params, s.inputs())?;
    let lp = token_logprobs(tape, out.logits, &s.response_rows(), s.targets())?;
    let total = tape.sum(lp)?;
    tape.reshape(total, vec![1])
}

fn frozen_logprob(model: &TinyLM, s: &EncodedSample) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false)?;
    let v = response_logprob(model, &mut tape, &params, s)?;
    Ok(tape.item(v))
}

struct DpoItem {
    chosen: EncodedSample,
    rejected: EncodedSample,
    ref_chosen: f64,
    ref_rejected: f64,
}

fn dpo_items(reference: &TinyLM, data: &[PreferenceRecord], format: &SequenceFormat) -> Result<Vec<DpoItem>> {
    encode_pairs(data, |i, r| format.encode(reference.config(), i, r))?
        .into_par_iter()
        .map(|(chosen, rejected)| {
            Ok(DpoItem {
                ref_chosen: frozen_logprob(reference, &chosen)?,
                ref_rejected: frozen_logprob(reference, &rejected)?,
                chosen,
                rejected,
            })
        })
        .collect()
}

/// Direct preference optimization against a frozen reference; defaults to a
/// copy of the student as it was before training.
pub fn train_dpo(
    student: &mut TinyLM,
    reference: Option<&TinyLM>,
    data: &[PreferenceRecord],
    beta: f64,
    cfg: &TrainingConfig,
    format: &SequenceFormat,
) -> Result<RunManifest> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("dpo", "beta", "must be positive"));
    }
    let frozen;
    let reference = match reference {
        Some(r) => r,
        None => {
            frozen = student.clone();
            &frozen
        }
    };
    if reference.config().vocab_size != student.config().vocab_size {
        return Err(Error::Contract("reference and policy vocabularies differ".into()));
    }
    let items = dpo_items(reference, data, format)?;
    let total = cfg.total_steps(items.len());
    let mut session = Session::start(
        "dpo",
        cfg,
        student,
        total,
        json!({"training": cfg.portable(), "objective": {"type": "dpo", "beta": beta}, "template": format.template.source()}),
        dataset_hash(data),
    )?;
    run_epochs(&mut session, student, cfg, &items, |m: &TinyLM, tape: &mut Tape, params, it: &DpoItem| {
        let c = response_logprob(m, tape, params, &it.chosen)?;
        let r = response_logprob(m, tape, params, &it.rejected)?;
        let loss = dpo_loss(tape, c, r, &[it.ref_chosen], &[it.ref_rejected], beta)?;
        let margin = (tape.item(c) - it.ref_chosen) - (tape.item(r) - it.ref_rejected);
        Ok(SampleOutput {
            loss,
            metrics: vec![("accuracy", win(margin)), ("margin", margin)],
        })
    })?;
    session.finish(student)
}

/// Fraction of pairs whose implicit reward margin is positive (ties ½).
pub fn dpo_accuracy(
    policy: &TinyLM,
    reference: &TinyLM,
    data: &[PreferenceRecord],
    format: &SequenceFormat,
) -> Result<f64> {
    let items = dpo_items(reference, data, format)?;
    let wins = items
        .par_iter()
        .map(|it| {
            let margin = (frozen_logprob(policy, &it.chosen)? - it.ref_chosen)
                - (frozen_logprob(policy, &it.rejected)? - it.ref_rejected);
            Ok(win(margin))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(wins.iter().sum::<f64>() / wins.len() as f64)
}

/// Backbone plus a scalar head over the mean-pooled final hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub backbone: TinyLM,
    /// `[d_model × 1]`
    pub head_weight: Tensor,
    /// `[1]`
    pub head_bias: Tensor,
}

impl RewardModel {
    /// A zero head, so every sequence initially scores 0.
    pub fn new(backbone: TinyLM) -> Self {
        let d = backbone.config().d_model;
        Self {
            backbone,
            head_weight: Tensor::zeros(&[d, 1]),
            head_bias: Tensor::zeros(&[1]),
        }
    }

    /// Scalar score `[1]` for `tokens` using parameters bound on `tape`.
    pub fn score_on(&self, tape: &mut Tape, params: &[Var], tokens: &[u32]) -> Result<Var> {
        let n = params.len();
        let out = self.backbone.forward_on(tape, &params[..n - 2], tokens)?;
        let t_len = tokens.len();
        let d = self.backbone.config().d_model;
        let ht = tape.transpose(out.hidden)?;
        let summed = tape.sum_last_dim(ht)?;
        let pooled = tape.scale(summed, 1.0 / t_len as f64)?;
        let pooled = tape.reshape(pooled, vec![1, d])?;
        let s = tape.matmul(pooled, params[n - 2])?;
        let s = tape.reshape(s, vec![1])?;
        tape.add(s, params[n - 1])
    }

    pub fn score(&self, tokens: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape)?;
        let v = self.score_on(&mut tape, &params, tokens)?;
        Ok(tape.item(v))
    }

    fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

impl Trainable for RewardModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.backbone.tensors();
        v.push(&self.head_weight);
        v.push(&self.head_bias);
        v
    }

    fn tensor_data_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.param_data_mut();
        v.push(self.head_weight.data_mut());
        v.push(self.head_bias.data_mut());
        v
    }

    fn save(&self, dir: &Path) -> Result<()> {
        save_model(&self.backbone, dir)?;
        save_tensors(
            &dir.join(HEAD_DIR),
            [("weight", &self.head_weight), ("bias", &self.head_bias)],
        )
    }

    fn load_weights(&mut self, dir: &Path) -> Result<()> {
        let loaded = load_reward_model(dir)?;
        let (mut a, mut b) = (loaded.backbone.config().clone(), self.backbone.config().clone());
        a.seed = 0;
        b.seed = 0;
        if a != b {
            return Err(Error::Contract(format!("{}: reward model config differs", dir.display())));
        }
        *self = loaded;
        Ok(())
    }
}

pub fn load_reward_model(dir: &Path) -> Result<RewardModel> {
    let backbone = load_model(dir)?;
    let d = backbone.config().d_model;
    let head_dir = dir.join(HEAD_DIR);
    let mut weight = None;
    let mut bias = None;
    for (name, t) in load_tensors(&head_dir)? {
        match name.as_str() {
            "weight" if t.shape() == [d, 1] => weight = Some(t),
            "bias" if t.shape() == [1] => bias = Some(t),
            _ => return Err(Error::Contract(format!("{}: unexpected head tensor {name}", head_dir.display()))),
        }
    }
    match (weight, bias) {
        (Some(head_weight), Some(head_bias)) => Ok(RewardModel {
            backbone,
            head_weight,
            head_bias,
        }),
        _ => Err(Error::Contract(format!("{}: incomplete reward head", head_dir.display()))),
    }
}

fn reward_pairs(model: &RewardModel, data: &[PreferenceRecord], format: &SequenceFormat) -> Result<Vec<(EncodedSample, EncodedSample)>> {
    encode_pairs(data, |i, r| format.encode_full(model.backbone.config(), i, r))
}

/// Bradley–Terry training of a scalar reward model on preference pairs.
pub fn train_reward_model(
    model: &mut RewardModel,
    data: &[PreferenceRecord],
    cfg: &TrainingConfig,
    format: &SequenceFormat,
) -> Result<RunManifest> {
    let pairs = reward_pairs(model, data, format)?;
    let total = cfg.total_steps(pairs.len());
    let mut session = Session::start(
        "reward_model",
        cfg,
        model,
        total,
        json!({"training": cfg.portable(), "objective": {"type": "reward_model"}, "template": format.template.source()}),
        dataset_hash(data),
    )?;
    run_epochs(&mut session, model, cfg, &pairs, |m: &RewardModel, tape: &mut Tape, params, (c, r)| {
        let rc = m.score_on(tape, params, &c.tokens)?;
        let rr = m.score_on(tape, params, &r.tokens)?;
        let loss = reward_model_loss(tape, rc, rr)?;
        Ok(SampleOutput {
            loss,
            metrics: vec![("accuracy", win(tape.item(rc) - tape.item(rr)))],
        })
    })?;
    session.finish(model)
}

/// Fraction of pairs scored chosen > rejected (ties ½).
pub fn reward_accuracy(model: &RewardModel, data: &[PreferenceRecord], format: &SequenceFormat) -> Result<f64> {
    let pairs = reward_pairs(model, data, format)?;
    let wins = pairs
        .par_iter()
        .map(|(c, r)| Ok(win(model.score(&c.tokens)? - model.score(&r.tokens)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(wins.iter().sum::<f64>() / wins.len() as f64)
}
