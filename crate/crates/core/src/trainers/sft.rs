use std::collections::HashMap;

use rayon::prelude::*;
use serde_json::json;

use super::engine::{run_epochs, SampleOutput, Session};
use super::{dataset_hash, RunManifest, SequenceFormat, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::{EncodedSample, TinyLM};
use crate::numerics::Tape;
use crate::objectives::{combined_kd_loss, sft_loss, topk_kld, DistillSpec};
use crate::records::{LabeledRecord, TopKLogitsRecord};

/// Encode labeled records, skipping (with a warning) any whose response
/// does not survive truncation. Returns `(sample_index, encoding)` pairs.
pub(crate) fn encode_labeled(
    model: &TinyLM,
    data: &[LabeledRecord],
    format: &SequenceFormat,
) -> Result<Vec<(usize, EncodedSample)>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no labeled records to train on".into()));
    }
    let mut out = Vec::with_capacity(data.len());
    for (i, rec) in data.iter().enumerate() {
        match format.encode(model.config(), &rec.instruction, &rec.output) {
            Ok(s) => out.push((i, s)),
            Err(Error::DegenerateBatch(msg)) => log::warn!("skipping sample {i}: {msg}"),
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("every sample was truncated away".into()));
    }
    Ok(out)
}

fn snapshot(cfg: &TrainingConfig, format: &SequenceFormat, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "training": cfg.portable(),
        "template": format.template.source(),
        "system_prompt": format.system_prompt,
        "max_seq_length": format.max_seq_length,
        "objective": extra,
    })
}

/// Supervised fine-tuning on teacher responses (response-masked CE).
pub fn train_sft(
    student: &mut TinyLM,
    data: &[LabeledRecord],
    cfg: &TrainingConfig,
    format: &SequenceFormat,
) -> Result<RunManifest> {
    let samples = encode_labeled(student, data, format)?;
    let total = cfg.total_steps(samples.len());
    let mut session = Session::start(
        "sft",
        cfg,
        student,
        total,
        snapshot(cfg, format, json!({"type": "sft"})),
        dataset_hash(data),
    )?;
    run_epochs(&mut session, student, cfg, &samples, |m: &TinyLM, tape, params, (_, s)| {
        let out = m.forward_on(tape, params, s.inputs())?;
        let loss = sft_loss(tape, out.logits, s.targets(), &s.mask)?;
        Ok(SampleOutput { loss, metrics: vec![] })
    })?;
    session.finish(student)
}

/// Pair each encoded sample with its logits record, checking alignment.
fn align(
    samples: Vec<(usize, EncodedSample)>,
    n_records: usize,
    logits: &[TopKLogitsRecord],
) -> Result<Vec<(EncodedSample, &TopKLogitsRecord)>> {
    let mut by_index: HashMap<usize, &TopKLogitsRecord> = HashMap::with_capacity(logits.len());
    for r in logits {
        if r.sample_index >= n_records {
            return Err(Error::Alignment {
                sample_index: r.sample_index,
                message: format!("logits record beyond the {n_records} labeled samples"),
            });
        }
        if by_index.insert(r.sample_index, r).is_some() {
            return Err(Error::Alignment {
                sample_index: r.sample_index,
                message: "duplicate logits record".into(),
            });
        }
    }
    samples
        .into_iter()
        .map(|(i, s)| {
            let r = by_index.get(&i).ok_or_else(|| Error::Alignment {
                sample_index: i,
                message: "no logits record for this sample".into(),
            })?;
            let rows = s.response_rows().len();
            if r.positions.len() != rows {
                return Err(Error::Alignment {
                    sample_index: i,
                    message: format!("{} logits positions for {rows} response tokens", r.positions.len()),
                });
            }
            Ok((s, *r))
        })
        .collect()
}

/// Student training on `(1 − kd_ratio)·CE + kd_ratio·divergence` against
/// precomputed teacher top-k log-probs.
pub fn train_white_box(
    student: &mut TinyLM,
    data: &[LabeledRecord],
    logits: &[TopKLogitsRecord],
    spec: &DistillSpec,
    cfg: &TrainingConfig,
    format: &SequenceFormat,
) -> Result<RunManifest> {
    spec.validate()?;
    let samples = align(encode_labeled(student, data, format)?, data.len(), logits)?;
    let total = cfg.total_steps(samples.len());
    let mut session = Session::start(
        "white_box_kd",
        cfg,
        student,
        total,
        snapshot(cfg, format, serde_json::to_value(spec).expect("spec serializes")),
        dataset_hash(data),
    )?;
    run_epochs(&mut session, student, cfg, &samples, |m: &TinyLM, tape: &mut Tape, params, (s, rec)| {
        let out = m.forward_on(tape, params, s.inputs())?;
        let sft = sft_loss(tape, out.logits, s.targets(), &s.mask)?;
        let div = topk_kld(tape, rec, out.logits, &s.response_rows(), spec)?;
        let loss = combined_kd_loss(tape, sft, div, spec.kd_ratio)?;
        Ok(SampleOutput {
            loss,
            metrics: vec![("sft", tape.item(sft)), ("divergence", tape.item(div))],
        })
    })?;
    session.finish(student)
}

/// Mean response-token cross-entropy over a dataset (per-sample means
/// averaged over samples).
pub fn heldout_ce(model: &TinyLM, data: &[LabeledRecord], format: &SequenceFormat) -> Result<f64> {
    let samples = encode_labeled(model, data, format)?;
    let losses = samples
        .par_iter()
        .map(|(_, s)| {
            let mut tape = Tape::new();
            let params = model.bind(&mut tape, false)?;
            let out = model.forward_on(&mut tape, &params, s.inputs())?;
            let loss = sft_loss(&mut tape, out.logits, s.targets(), &s.mask)?;
            Ok(tape.item(loss))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
