use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

fn check_pair(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 1 {
        return Err(Error::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Batch mean of `−log σ(β[(π_c − ref_c) − (π_r − ref_r)])` over
/// sequence-summed response log-probs. Reference log-probs are constants.
pub fn dpo_loss(
    tape: &mut Tape,
    policy_chosen: Var,
    policy_rejected: Var,
    ref_chosen: &[f64],
    ref_rejected: &[f64],
    beta: f64,
) -> Result<Var> {
    check_pair(tape, policy_chosen, policy_rejected, "dpo_loss")?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Contract(format!("beta must be positive, got {beta}")));
    }
    let n = tape.value(policy_chosen).numel();
    if ref_chosen.len() != n || ref_rejected.len() != n {
        return Err(Error::Shape {
            op: "dpo_loss",
            lhs: vec![n],
            rhs: vec![ref_chosen.len(), ref_rejected.len()],
        });
    }
    let rc = tape.constant(Tensor::vector(ref_chosen.to_vec()))?;
    let rr = tape.constant(Tensor::vector(ref_rejected.to_vec()))?;
    let chosen = tape.sub(policy_chosen, rc)?;
    let rejected = tape.sub(policy_rejected, rr)?;
    let margin = tape.sub(chosen, rejected)?;
    let z = tape.scale(margin, -beta)?;
    let losses = tape.softplus(z)?;
    tape.mean(losses)
}

/// Bradley–Terry pairwise loss: batch mean of `−log σ(r_c − r_r)`.
pub fn reward_model_loss(tape: &mut Tape, reward_chosen: Var, reward_rejected: Var) -> Result<Var> {
    check_pair(tape, reward_chosen, reward_rejected, "reward_model_loss")?;
    let diff = tape.sub(reward_rejected, reward_chosen)?;
    let losses = tape.softplus(diff)?;
    tape.mean(losses)
}
