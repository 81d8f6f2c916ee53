use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// One prompt with `G` sampled completions.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRollout {
    pub prompt: Vec<u32>,
    pub completions: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    /// Per-token log-probs of each completion under the sampling policy.
    pub old_logprobs: Vec<Vec<f64>>,
}

impl GroupRollout {
    pub fn validate(&self) -> Result<()> {
        let g = self.completions.len();
        if g < 2 {
            return Err(Error::Contract(format!("group size must be at least 2, got {g}")));
        }
        if self.rewards.len() != g || self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Contract("one finite reward per completion required".into()));
        }
        if self.old_logprobs.len() != g {
            return Err(Error::Contract("missing old_logprobs for some completions".into()));
        }
        for (c, lp) in self.completions.iter().zip(&self.old_logprobs) {
            if c.is_empty() || c.len() != lp.len() {
                return Err(Error::Contract(
                    "old_logprobs must cover every completion token".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Group-standardized rewards `(r − mean) / (std + ε)` with the population
/// standard deviation; all-equal rewards give a zero vector.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!("group size must be at least 2, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite { op: "grpo_advantages" });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(centered.iter().map(|c| c / (std + ADVANTAGE_EPS)).collect())
}

/// Unbiased per-token KL estimator `exp(ref − θ) − (ref − θ) − 1` (≥ 0).
pub fn kl_penalty(policy_logprob: f64, ref_logprob: f64) -> f64 {
    let d = ref_logprob - policy_logprob;
    d.exp() - d - 1.0
}

/// Clipped surrogate with a KL penalty to the reference policy.
///
/// `policy_logprobs[i]` is a `[len_i]` tape vector of the current policy's
/// log-probs for completion `i`. Each completion contributes the mean over
/// its tokens of `−min(ρA, clip(ρ, 1−ε, 1+ε)A) + kl_coeff·kl`; completions
/// are then averaged.
pub fn grpo_loss(
    tape: &mut Tape,
    group: &GroupRollout,
    policy_logprobs: &[Var],
    ref_logprobs: &[Vec<f64>],
    clip_eps: f64,
    kl_coeff: f64,
) -> Result<Var> {
    group.validate()?;
    if policy_logprobs.len() != group.completions.len() || ref_logprobs.len() != group.completions.len() {
        return Err(Error::Contract("policy/reference log-probs must cover the group".into()));
    }
    let advantages = grpo_advantages(&group.rewards)?;
    let mut per_completion = Vec::with_capacity(advantages.len());
    for (i, &lp) in policy_logprobs.iter().enumerate() {
        let len = group.completions[i].len();
        if tape.shape(lp) != [len] || ref_logprobs[i].len() != len {
            return Err(Error::Shape {
                op: "grpo_loss",
                lhs: tape.shape(lp).to_vec(),
                rhs: vec![len],
            });
        }
        let old = tape.constant(Tensor::vector(group.old_logprobs[i].clone()))?;
        let adv = tape.constant(Tensor::vector(vec![advantages[i]; len]))?;
        let reference = tape.constant(Tensor::vector(ref_logprobs[i].clone()))?;

        let log_ratio = tape.sub(lp, old)?;
        let ratio = tape.exp(log_ratio)?;
        let unclipped = tape.mul(ratio, adv)?;
        let clipped = tape.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps)?;
        let clipped = tape.mul(clipped, adv)?;
        let surrogate = tape.minimum(unclipped, clipped)?;

        let d = tape.sub(reference, lp)?;
        let ed = tape.exp(d)?;
        let kl = tape.sub(ed, d)?;
        let kl = tape.add_scalar(kl, -1.0)?;
        let kl = tape.scale(kl, kl_coeff)?;

        let neg_surrogate = tape.neg(surrogate)?;
        let per_token = tape.add(neg_surrogate, kl)?;
        per_completion.push(tape.mean(per_token)?);
    }
    let mut total = per_completion[0];
    for &c in &per_completion[1..] {
        total = tape.add(total, c)?;
    }
    tape.scale(total, 1.0 / per_completion.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_fixed_cases() {
        assert_eq!(grpo_advantages(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        let a = grpo_advantages(&[0.0, 1.0]).unwrap();
        assert!((a[0] + 1.0).abs() <= 1e-7 && (a[1] - 1.0).abs() <= 1e-7);
        assert!(grpo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn kl_penalty_properties() {
        assert_eq!(kl_penalty(-1.3, -1.3), 0.0);
        for (p, r) in [(-1.0, -2.0), (-5.0, -0.1), (0.0, -3.0)] {
            assert!(kl_penalty(p, r) >= 0.0);
        }
    }

    fn rollout(rewards: Vec<f64>, len: usize) -> GroupRollout {
        let g = rewards.len();
        GroupRollout {
            prompt: vec![1],
            completions: vec![vec![5; len]; g],
            rewards,
            old_logprobs: (0..g).map(|i| vec![-0.5 - 0.1 * i as f64; len]).collect(),
        }
    }

    #[test]
    fn on_policy_surrogate_vanishes() {
        let group = rollout(vec![0.0, 1.0, 0.0, 1.0], 3);
        let mut t = Tape::new();
        let lps: Vec<Var> = group
            .old_logprobs
            .iter()
            .map(|lp| t.param(Tensor::vector(lp.clone())).unwrap())
            .collect();
        let loss = grpo_loss(&mut t, &group, &lps, &group.old_logprobs, 0.2, 0.04).unwrap();
        assert!(t.item(loss).abs() < 1e-12);
    }

    #[test]
    fn equal_rewards_leave_only_kl() {
        let group = rollout(vec![0.5; 3], 2);
        let refs: Vec<Vec<f64>> = (0..3).map(|_| vec![-0.2, -0.9]).collect();
        let mut t = Tape::new();
        let lps: Vec<Var> = group
            .old_logprobs
            .iter()
            .map(|lp| t.param(Tensor::vector(lp.clone())).unwrap())
            .collect();
        let loss = grpo_loss(&mut t, &group, &lps, &refs, 0.2, 0.04).unwrap();
        let mut expected = 0.0;
        for (lp, r) in group.old_logprobs.iter().zip(&refs) {
            expected += lp.iter().zip(r).map(|(&p, &q)| kl_penalty(p, q)).sum::<f64>() / 2.0;
        }
        expected *= 0.04 / 3.0;
        assert!((t.item(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_old_logprobs_rejected() {
        let mut group = rollout(vec![0.0, 1.0], 2);
        group.old_logprobs.pop();
        let mut t = Tape::new();
        let lp = t.param(Tensor::vector(vec![-1.0, -1.0])).unwrap();
        assert!(grpo_loss(&mut t, &group, &[lp, lp], &[vec![0.0; 2], vec![0.0; 2]], 0.2, 0.0).is_err());
    }
}
