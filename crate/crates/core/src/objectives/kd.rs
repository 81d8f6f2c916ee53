use super::{DistillSpec, DistillationType};
use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, Tape, Tensor, Var};
use crate::records::TopKLogitsRecord;

/// Teacher probabilities are floored here before taking logs in reverse KL.
pub const TEACHER_PROB_FLOOR: f64 = 1e-12;

fn masked_rows(mask: &[f64]) -> Result<Vec<usize>> {
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Contract("mask must be 0/1 valued".into()));
    }
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1.0)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::DegenerateBatch("all-zero response mask".into()));
    }
    Ok(rows)
}

fn check_rows(tape: &Tape, logits: Var, mask: &[f64]) -> Result<()> {
    if tape.shape(logits).len() != 2 || tape.value(logits).rows() != mask.len() {
        return Err(Error::Shape {
            op: "loss mask",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    Ok(())
}

/// Log-probability of `targets[r]` under row `r` of `logits`, for each row
/// in `rows`. Returns a `[rows.len()]` vector.
pub fn token_logprobs(tape: &mut Tape, logits: Var, rows: &[usize], targets: &[u32]) -> Result<Var> {
    let picked = tape.select_rows(logits, rows)?;
    let ls = tape.log_softmax(picked)?;
    let cols: Vec<Vec<usize>> = rows.iter().map(|&r| vec![targets[r] as usize]).collect();
    let lp = tape.gather(ls, &cols)?;
    tape.reshape(lp, vec![rows.len()])
}

/// Mean negative log-likelihood of `targets` over masked rows.
pub fn sft_loss(tape: &mut Tape, logits: Var, targets: &[u32], mask: &[f64]) -> Result<Var> {
    check_rows(tape, logits, mask)?;
    if targets.len() != mask.len() {
        return Err(Error::Shape {
            op: "sft_loss",
            lhs: vec![targets.len()],
            rhs: vec![mask.len()],
        });
    }
    let rows = masked_rows(mask)?;
    let lp = token_logprobs(tape, logits, &rows, targets)?;
    let mean = tape.mean(lp)?;
    tape.neg(mean)
}

/// Mean over rows of the divergence between a constant teacher distribution
/// (given as log-probs, `[R × K]`) and `softmax(student)` (`[R × K]`).
pub fn divergence_rows(tape: &mut Tape, teacher_logprobs: &Tensor, student: Var, kind: DistillationType) -> Result<Var> {
    if teacher_logprobs.shape() != tape.shape(student) || teacher_logprobs.shape().len() != 2 {
        return Err(Error::Shape {
            op: "divergence",
            lhs: teacher_logprobs.shape().to_vec(),
            rhs: tape.shape(student).to_vec(),
        });
    }
    let student_ls = tape.log_softmax(student)?;
    let per_row = match kind {
        DistillationType::ForwardKld => {
            let probs: Vec<f64> = teacher_logprobs.data().iter().map(|lp| lp.exp()).collect();
            let neg_entropy: Vec<f64> = teacher_logprobs
                .data()
                .chunks(teacher_logprobs.last_dim())
                .map(|row| row.iter().map(|&lp| if lp.exp() > 0.0 { lp.exp() * lp } else { 0.0 }).sum())
                .collect();
            let p = tape.constant(Tensor::new(teacher_logprobs.shape().to_vec(), probs)?)?;
            let ne = tape.constant(Tensor::vector(neg_entropy))?;
            let weighted = tape.mul(student_ls, p)?;
            let cross = tape.sum_last_dim(weighted)?;
            tape.sub(ne, cross)?
        }
        DistillationType::ReverseKld => {
            let floor = TEACHER_PROB_FLOOR.ln();
            let floored: Vec<f64> = teacher_logprobs.data().iter().map(|&lp| lp.max(floor)).collect();
            let lq = tape.constant(Tensor::new(teacher_logprobs.shape().to_vec(), floored)?)?;
            let ps = tape.exp(student_ls)?;
            let diff = tape.sub(student_ls, lq)?;
            let prod = tape.mul(ps, diff)?;
            tape.sum_last_dim(prod)?
        }
    };
    tape.mean(per_row)
}

fn full_divergence(
    tape: &mut Tape,
    teacher_logprobs: &Tensor,
    student_logits: Var,
    mask: &[f64],
    kind: DistillationType,
) -> Result<Var> {
    if teacher_logprobs.shape() != tape.shape(student_logits) {
        return Err(Error::Shape {
            op: kind.as_str(),
            lhs: teacher_logprobs.shape().to_vec(),
            rhs: tape.shape(student_logits).to_vec(),
        });
    }
    check_rows(tape, student_logits, mask)?;
    let rows = masked_rows(mask)?;
    let v = teacher_logprobs.last_dim();
    let teacher: Vec<f64> = rows.iter().flat_map(|&r| teacher_logprobs.row(r).iter().copied()).collect();
    let teacher = Tensor::new(vec![rows.len(), v], teacher)?;
    let student = tape.select_rows(student_logits, &rows)?;
    divergence_rows(tape, &teacher, student, kind)
}

/// Masked mean of `Σ p_T (log p_T − log p_S)`.
pub fn forward_kld(tape: &mut Tape, teacher_logprobs: &Tensor, student_logits: Var, mask: &[f64]) -> Result<Var> {
    full_divergence(tape, teacher_logprobs, student_logits, mask, DistillationType::ForwardKld)
}

/// Masked mean of `Σ p_S (log p_S − log p_T)` with `p_T` floored at 1e-12.
pub fn reverse_kld(tape: &mut Tape, teacher_logprobs: &Tensor, student_logits: Var, mask: &[f64]) -> Result<Var> {
    full_divergence(tape, teacher_logprobs, student_logits, mask, DistillationType::ReverseKld)
}

/// Divergence restricted to each position's teacher top-k support.
///
/// Teacher probabilities and student logits are both renormalized over the
/// k support tokens. With k = 1 both sides collapse to the same single atom,
/// so the loss is identically zero.
pub fn topk_kld(
    tape: &mut Tape,
    record: &TopKLogitsRecord,
    student_logits: Var,
    rows: &[usize],
    spec: &DistillSpec,
) -> Result<Var> {
    let vocab = tape.value(student_logits).last_dim();
    let misaligned = |message: String| Error::Alignment {
        sample_index: record.sample_index,
        message,
    };
    if record.positions.len() != rows.len() {
        return Err(misaligned(format!(
            "logits record has {} positions but the sample has {} response tokens",
            record.positions.len(),
            rows.len()
        )));
    }
    if rows.is_empty() {
        return Err(Error::DegenerateBatch("no response positions".into()));
    }
    let k = record.positions[0].topk.len();
    if spec.top_k != 0 && k != spec.effective_k(vocab) {
        return Err(misaligned(format!("record carries k = {k}, expected {}", spec.effective_k(vocab))));
    }
    let n_rows = tape.value(student_logits).rows();
    let mut teacher = Vec::with_capacity(rows.len() * k);
    let mut index = Vec::with_capacity(rows.len() * k);
    for (pos, &row) in record.positions.iter().zip(rows) {
        if pos.topk.len() != k {
            return Err(misaligned("positions carry different k".into()));
        }
        if row >= n_rows {
            return Err(misaligned(format!("row {row} beyond sequence of {n_rows}")));
        }
        let lps: Vec<f64> = pos.topk.iter().map(|&(_, lp)| lp).collect();
        teacher.extend(log_softmax_row(&lps));
        for &(id, _) in &pos.topk {
            if id as usize >= vocab {
                return Err(misaligned(format!("token id {id} >= vocab {vocab}")));
            }
            index.push(row * vocab + id as usize);
        }
    }
    let teacher = Tensor::new(vec![rows.len(), k], teacher)?;
    let student = tape.gather_flat(student_logits, index, vec![rows.len(), k])?;
    divergence_rows(tape, &teacher, student, spec.distillation_type)
}

/// `(1 − kd_ratio)·sft + kd_ratio·divergence`; the endpoints reduce to a
/// single term exactly.
pub fn combined_kd_loss(tape: &mut Tape, sft: Var, divergence: Var, kd_ratio: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&kd_ratio) {
        return Err(Error::Contract(format!("kd_ratio {kd_ratio} outside [0, 1]")));
    }
    if kd_ratio == 0.0 {
        return Ok(sft);
    }
    if kd_ratio == 1.0 {
        return Ok(divergence);
    }
    let a = tape.scale(sft, 1.0 - kd_ratio)?;
    let b = tape.scale(divergence, kd_ratio)?;
    tape.add(a, b)
}
