use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ChatTemplate, TinyLM};
use crate::numerics::log_softmax_row;
use crate::records::{LabeledRecord, TopKLogitsRecord, TopKPosition, TopKWriter};

#[derive(Clone, Debug, PartialEq)]
pub struct ExportSummary {
    pub records: usize,
    pub positions: usize,
    /// Average teacher probability mass captured by the exported top-k.
    pub mean_topk_mass: f64,
}

/// The `k` most probable tokens of one row of log-probs, ties broken by
/// lower token id.
pub fn topk_of_row(logprobs: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<usize> = (0..logprobs.len()).collect();
    idx.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i as u32, logprobs[i])).collect()
}

/// Token budget for a training sequence: the configured maximum, capped by
/// what the model window can consume (inputs are one shorter than tokens).
pub fn sequence_budget(max_seq_length: usize, model: &TinyLM) -> usize {
    max_seq_length.min(model.config().max_seq_len + 1)
}

/// Teacher-forced top-k export. One record per labeled sample is written,
/// in input order, to a JSON Lines file at `path`.
pub fn export_topk_logits(
    teacher: &TinyLM,
    labeled: &[LabeledRecord],
    k: usize,
    max_seq_length: usize,
    template: &ChatTemplate,
    system_prompt: &str,
    path: &Path,
) -> Result<ExportSummary> {
    let vocab = teacher.config().vocab_size;
    if k == 0 || k > vocab {
        return Err(Error::Contract(format!("top-k {k} must lie in 1..={vocab}")));
    }
    let budget = sequence_budget(max_seq_length, teacher);
    let mut writer = TopKWriter::create(path)?;
    let mut positions = 0;
    let mut mass = 0.0;
    // bounded chunks keep memory flat while preserving output order
    for (chunk_idx, chunk) in labeled.chunks(64).enumerate() {
        let records = chunk
            .par_iter()
            .enumerate()
            .map(|(j, rec)| {
                let sample_index = chunk_idx * 64 + j;
                let sample = match template.encode(system_prompt, &rec.instruction, &rec.output, budget) {
                    Ok(s) => s,
                    // trainers skip the same samples, so an empty record keeps indices aligned
                    Err(Error::DegenerateBatch(_)) => {
                        log::warn!("sample {sample_index}: response truncated away; exporting no positions");
                        return Ok(TopKLogitsRecord {
                            sample_index,
                            positions: Vec::new(),
                        });
                    }
                    Err(e) => return Err(e),
                };
                let logits = teacher.forward(sample.inputs())?;
                let targets = sample.targets();
                let positions = sample
                    .response_rows()
                    .into_iter()
                    .map(|r| TopKPosition {
                        target_token: targets[r],
                        topk: topk_of_row(&log_softmax_row(logits.row(r)), k),
                    })
                    .collect();
                Ok(TopKLogitsRecord {
                    sample_index,
                    positions,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for r in &records {
            positions += r.positions.len();
            mass += r
                .positions
                .iter()
                .map(|p| p.topk.iter().map(|&(_, lp)| lp.exp()).sum::<f64>())
                .sum::<f64>();
            writer.write(r)?;
        }
    }
    writer.finish()?;
    Ok(ExportSummary {
        records: labeled.len(),
        positions,
        mean_topk_mass: if positions == 0 { 0.0 } else { mass / positions as f64 },
    })
}
