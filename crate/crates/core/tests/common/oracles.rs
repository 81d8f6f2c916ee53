//! Randomized gradient and divergence checks shared by the objective tests
//! and the acceptance run.

use easydistill::model::{ModelConfig, TinyLM};
use easydistill::numerics::{grad_check_many, log_softmax_row, Tape, Tensor, Var};
use easydistill::objectives::{
    combined_kd_loss, dpo_loss, forward_kld, grpo_loss, reverse_kld, reward_model_loss, sft_loss, topk_kld, DistillSpec,
    DistillationType, GroupRollout,
};
use easydistill::records::{TopKLogitsRecord, TopKPosition};
use easydistill::teacher::topk_of_row;
use easydistill::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn log_softmax_rows(t: &Tensor) -> Tensor {
    let data = (0..t.rows()).flat_map(|r| log_softmax_row(t.row(r))).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Teacher top-k record for every row of `teacher_logprobs`.
pub fn topk_record(teacher_logprobs: &Tensor, k: usize) -> TopKLogitsRecord {
    TopKLogitsRecord {
        sample_index: 0,
        positions: (0..teacher_logprobs.rows())
            .map(|r| TopKPosition {
                target_token: 0,
                topk: topk_of_row(teacher_logprobs.row(r), k),
            })
            .collect(),
    }
}

fn mask<R: Rng>(rng: &mut R, rows: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..rows).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
    m[rng.random_range(0..rows)] = 1.0;
    m
}

fn spec(kind: DistillationType, k: usize) -> DistillSpec {
    DistillSpec {
        kd_ratio: 0.5,
        distillation_type: kind,
        top_k: k,
        max_seq_length: 512,
    }
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
    grad_check_many(f, inputs, FD_STEP).unwrap()
}

/// Smallest model that still exercises every layer type.
pub fn gradcheck_model(seed: u64) -> TinyLM {
    TinyLM::init(ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        seed,
    })
    .unwrap()
}

/// Worst relative gradient error per loss for one random case.
pub fn gradient_case(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let rows = r.random_range(2..6);
    let vocab = r.random_range(3..9);
    let teacher = log_softmax_rows(&matrix(&mut r, rows, vocab, 3.0));
    let logits = matrix(&mut r, rows, vocab, 3.0);
    let m = mask(&mut r, rows);
    let targets: Vec<u32> = (0..rows).map(|_| r.random_range(0..vocab as u32)).collect();
    let mut out = Vec::new();

    out.push(("sft_loss", check(|t, v| sft_loss(t, v[0], &targets, &m), std::slice::from_ref(&logits))));
    out.push(("forward_kld", check(|t, v| forward_kld(t, &teacher, v[0], &m), std::slice::from_ref(&logits))));
    out.push(("reverse_kld", check(|t, v| reverse_kld(t, &teacher, v[0], &m), std::slice::from_ref(&logits))));

    let k = r.random_range(2..=vocab);
    let record = topk_record(&teacher, k);
    let all_rows: Vec<usize> = (0..rows).collect();
    for (name, kind) in [("topk_kld/forward", DistillationType::ForwardKld), ("topk_kld/reverse", DistillationType::ReverseKld)] {
        let s = spec(kind, k);
        out.push((name, check(|t, v| topk_kld(t, &record, v[0], &all_rows, &s), std::slice::from_ref(&logits))));
    }

    let ratio = r.random_range(0.0..1.0);
    out.push((
        "combined_kd_loss",
        check(
            |t, v| {
                let a = sft_loss(t, v[0], &targets, &m)?;
                let b = forward_kld(t, &teacher, v[0], &m)?;
                combined_kd_loss(t, a, b, ratio)
            },
            std::slice::from_ref(&logits),
        ),
    ));

    let n = r.random_range(1..5);
    let vec = |r: &mut ChaCha8Rng, scale: f64| Tensor::vector((0..n).map(|_| r.random_range(-scale..0.0)).collect());
    let (pc, pr) = (vec(&mut r, 8.0), vec(&mut r, 8.0));
    let (rc, rr) = (vec(&mut r, 8.0).into_data(), vec(&mut r, 8.0).into_data());
    let beta = r.random_range(0.05..1.0);
    out.push(("dpo_loss", check(|t, v| dpo_loss(t, v[0], v[1], &rc, &rr, beta), &[pc.clone(), pr.clone()])));
    out.push(("reward_model_loss", check(|t, v| reward_model_loss(t, v[0], v[1]), &[pc, pr])));

    out.push(("grpo_loss", grpo_case(&mut r)));

    let model = gradcheck_model(seed);
    let len = r.random_range(3..=model.config().max_seq_len);
    let tokens: Vec<u32> = (0..len).map(|_| r.random_range(0..model.config().vocab_size as u32)).collect();
    let (inputs, next) = (&tokens[..len - 1], &tokens[1..]);
    let ce_mask = vec![1.0; len - 1];
    let params: Vec<Tensor> = model.params().iter().map(|p| p.tensor.clone()).collect();
    out.push((
        "tinylm_ce",
        check(
            |t, v| {
                let fwd = model.forward_on(t, v, inputs)?;
                sft_loss(t, fwd.logits, next, &ce_mask)
            },
            &params,
        ),
    ));
    out
}

fn grpo_case(r: &mut ChaCha8Rng) -> f64 {
    let g = r.random_range(2..5);
    let clip = 0.2;
    let lens: Vec<usize> = (0..g).map(|_| r.random_range(1..4)).collect();
    let policy: Vec<Tensor> = lens
        .iter()
        .map(|&l| Tensor::vector((0..l).map(|_| r.random_range(-4.0..-0.1)).collect()))
        .collect();
    // keep ratios off the clip boundaries, where the surrogate has kinks
    let old: Vec<Vec<f64>> = policy
        .iter()
        .map(|p| {
            p.data()
                .iter()
                .map(|&lp| loop {
                    let d: f64 = r.random_range(-0.5..0.5);
                    let ratio = d.exp();
                    if (ratio - (1.0 - clip)).abs() > 1e-3 && (ratio - (1.0 + clip)).abs() > 1e-3 {
                        break lp - d;
                    }
                })
                .collect()
        })
        .collect();
    let reference: Vec<Vec<f64>> = lens.iter().map(|&l| (0..l).map(|_| r.random_range(-4.0..-0.1)).collect()).collect();
    let mut rewards: Vec<f64> = (0..g).map(|_| r.random_range(0.0..1.0)).collect();
    rewards[0] += 1.0;
    let group = GroupRollout {
        prompt: vec![1],
        completions: lens.iter().map(|&l| vec![5; l]).collect(),
        rewards,
        old_logprobs: old,
    };
    check(|t, v| grpo_loss(t, &group, v, &reference, clip, 0.04), &policy)
}

/// Measured deviations from the divergence laws on one random case.
pub struct DivergenceLaws {
    pub min_value: f64,
    pub identity: f64,
    pub shift: f64,
    pub topk_full_gap: f64,
}

fn value(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, logits: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone()).unwrap();
    let out = f(&mut tape, x).unwrap();
    tape.item(out)
}

pub fn divergence_case(seed: u64) -> DivergenceLaws {
    let mut r = rng(seed);
    let rows = r.random_range(1..5);
    let vocab = r.random_range(8..=64);
    let t_logits = matrix(&mut r, rows, vocab, 4.0);
    let teacher = log_softmax_rows(&t_logits);
    let student = matrix(&mut r, rows, vocab, 4.0);
    let shift = r.random_range(-50.0..50.0);
    let shifted = Tensor::new(student.shape().to_vec(), student.data().iter().map(|v| v + shift).collect()).unwrap();
    let m = vec![1.0; rows];
    let all: Vec<usize> = (0..rows).collect();

    let mut laws = DivergenceLaws {
        min_value: f64::INFINITY,
        identity: 0.0,
        shift: 0.0,
        topk_full_gap: 0.0,
    };
    for kind in [DistillationType::ForwardKld, DistillationType::ReverseKld] {
        let full = |t: &mut Tape, x: Var, tl: &Tensor| match kind {
            DistillationType::ForwardKld => forward_kld(t, tl, x, &m),
            DistillationType::ReverseKld => reverse_kld(t, tl, x, &m),
        };
        let d = value(|t, x| full(t, x, &teacher), &student);
        let d_shift = value(|t, x| full(t, x, &teacher), &shifted);
        let d_self = value(|t, x| full(t, x, &teacher), &t_logits);
        let record = topk_record(&teacher, vocab);
        let s = spec(kind, vocab);
        let d_topk = value(|t, x| topk_kld(t, &record, x, &all, &s), &student);
        laws.min_value = laws.min_value.min(d);
        laws.identity = laws.identity.max(d_self.abs());
        laws.shift = laws.shift.max((d - d_shift).abs());
        laws.topk_full_gap = laws.topk_full_gap.max((d - d_topk).abs());
    }
    laws
}
