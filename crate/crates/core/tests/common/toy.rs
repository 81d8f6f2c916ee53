//! Small synthetic corpora and model shapes shared by the integration tests.

use easydistill::model::{ChatTemplate, ModelConfig};
use easydistill::records::{LabeledRecord, PreferenceRecord};
use easydistill::trainers::{LrSchedulerType, SequenceFormat, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TEMPLATE: &str = "{user}={assistant}";
pub const ALPHABET: &[u8] = b"abcd";

pub fn format(max_seq_length: usize) -> SequenceFormat {
    SequenceFormat::new(ChatTemplate::parse(TEMPLATE).unwrap(), "", max_seq_length)
}

pub fn model_config(n_layers: usize, d_model: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 260,
        d_model,
        n_layers,
        n_heads: 2,
        d_ff: 2 * d_model,
        max_seq_len: 24,
        seed,
    }
}

pub fn training(dir: &std::path::Path, epochs: usize, batch: usize, accum: usize, lr: f64) -> TrainingConfig {
    TrainingConfig {
        output_dir: dir.to_path_buf(),
        num_train_epochs: epochs,
        per_device_train_batch_size: batch,
        gradient_accumulation_steps: accum,
        save_steps: 1000,
        logging_steps: 1,
        learning_rate: lr,
        weight_decay: 0.0,
        warmup_ratio: 0.0,
        lr_scheduler_type: LrSchedulerType::Constant,
        seed: 7,
        resume_from_checkpoint: None,
    }
}

fn word<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
        .collect()
}

/// Copy, reverse and single-digit addition tasks.
pub fn task<R: Rng>(rng: &mut R) -> LabeledRecord {
    match rng.random_range(0..3) {
        0 => {
            let w = word(rng, 2, 5);
            LabeledRecord::new(format!("c{w}"), w)
        }
        1 => {
            let w = word(rng, 2, 5);
            LabeledRecord::new(format!("r{w}"), w.chars().rev().collect::<String>())
        }
        _ => {
            let (a, b) = (rng.random_range(0..5u32), rng.random_range(0..5u32));
            LabeledRecord::new(format!("a{a}+{b}"), (a + b).to_string())
        }
    }
}

pub fn corpus(n: usize, seed: u64) -> Vec<LabeledRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| task(&mut rng)).collect()
}

/// Pairs whose chosen response carries a `!` marker.
pub fn marker_pairs(n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let rec = task(&mut rng);
            let body = word(&mut rng, 2, 3);
            PreferenceRecord {
                instruction: rec.instruction,
                chosen: format!("{body}!"),
                rejected: format!("{body}."),
            }
        })
        .collect()
}
