use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LrSchedulerType, TrainingConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::{load_tensors, save_tensors, write_json};
use crate::numerics::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STATE_FILE: &str = "state.json";

/// First and second moment estimates for each parameter buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: u64,
    buffers: usize,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .m
            .iter()
            .enumerate()
            .map(|(i, m)| (format!("m.{i}"), Tensor::vector(m.clone())))
            .chain(self.v.iter().enumerate().map(|(i, v)| (format!("v.{i}"), Tensor::vector(v.clone()))))
            .collect();
        save_tensors(dir, tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        write_json(
            &dir.join(STATE_FILE),
            &StateFile {
                step: self.step,
                buffers: self.m.len(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: StateFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
        let mut m = vec![None; state.buffers];
        let mut v = vec![None; state.buffers];
        for (name, t) in load_tensors(dir)? {
            let (kind, idx) = name
                .split_once('.')
                .and_then(|(k, i)| Some((k.to_string(), i.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Contract(format!("unexpected optimizer tensor {name}")))?;
            let slot = match kind.as_str() {
                "m" => m.get_mut(idx),
                "v" => v.get_mut(idx),
                _ => None,
            }
            .ok_or_else(|| Error::Contract(format!("unexpected optimizer tensor {name}")))?;
            *slot = Some(t.into_data());
        }
        let collect = |xs: Vec<Option<Vec<f64>>>| {
            xs.into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Contract(format!("{}: missing optimizer moments", dir.display())))
        };
        Ok(Self {
            m: collect(m)?,
            v: collect(v)?,
            step: state.step,
        })
    }
}

/// One AdamW update: bias-corrected moments, with weight decay applied
/// directly to the weights and scaled by `lr`.
pub fn optimizer_step<P: AsMut<[f64]>, G: AsRef<[f64]>>(
    params: &mut [P],
    grads: &[G],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    if state.m.is_empty() {
        state.m = params.iter_mut().map(|p| vec![0.0; p.as_mut().len()]).collect();
        state.v = state.m.clone();
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (p, g) = (p.as_mut(), g.as_ref());
        if state.m.get(i).map(Vec::len) != Some(p.len()) || g.len() != p.len() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: vec![p.len()],
                rhs: vec![g.len(), state.m.get(i).map_or(0, Vec::len)],
            });
        }
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            lhs: vec![params.len()],
            rhs: vec![state.m.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &g), m), v) in p.as_mut().iter_mut().zip(g.as_ref()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * weight_decay * *w;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Steps of linear warmup for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, cfg: &TrainingConfig) -> usize {
    (cfg.warmup_ratio * total_steps as f64).ceil() as usize
}

/// Learning rate at `step` (0-based): linear warmup from 0, then cosine
/// decay to 0 at `total_steps` (or constant for the constant scheduler).
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainingConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total_steps {total_steps}")));
    }
    let warmup = warmup_steps(total_steps, cfg);
    let lr = cfg.learning_rate;
    if step < warmup {
        return Ok(lr * step as f64 / warmup as f64);
    }
    match cfg.lr_scheduler_type {
        LrSchedulerType::Constant => Ok(lr),
        LrSchedulerType::Cosine => {
            let span = total_steps - warmup;
            if span == 0 {
                return Ok(lr);
            }
            let progress = (step - warmup) as f64 / span as f64;
            Ok((lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut params = vec![vec![1.0, -2.0, 3.0]];
        let mut state = OptimizerState::new();
        for _ in 0..5 {
            optimizer_step(&mut params, &[vec![0.0; 3]], &mut state, 1e-2, 0.0).unwrap();
        }
        assert_eq!(params[0], vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn zero_grad_decay_shrinks_geometrically() {
        let mut params = vec![vec![1.0, -2.0]];
        let mut state = OptimizerState::new();
        let (lr, wd) = (0.1, 0.05);
        for _ in 0..3 {
            optimizer_step(&mut params, &[vec![0.0; 2]], &mut state, lr, wd).unwrap();
        }
        let f = (1.0f64 - lr * wd).powi(3);
        assert!((params[0][0] - f).abs() < 1e-15);
        assert!((params[0][1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut w = vec![vec![1.0]];
        let mut state = OptimizerState::new();
        for _ in 0..500 {
            let g = vec![vec![2.0 * w[0][0]]];
            optimizer_step(&mut w, &g, &mut state, 1e-2, 0.0).unwrap();
        }
        assert!(w[0][0].abs() < 1e-3, "w = {}", w[0][0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut params = vec![vec![1.0, 2.0]];
        let mut state = OptimizerState::new();
        assert!(optimizer_step(&mut params, &[vec![0.0]], &mut state, 0.1, 0.0).is_err());
        assert!(optimizer_step(&mut params, &[vec![0.0; 2], vec![0.0]], &mut state, 0.1, 0.0).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainingConfig::default();
        let total = 100;
        assert_eq!(warmup_steps(total, &cfg), 10);
        assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(10, total, &cfg).unwrap(), 2e-5);
        assert!((lr_at(55, total, &cfg).unwrap() - 1e-5).abs() < 1e-18);
        assert!(lr_at(total, total, &cfg).unwrap().abs() < 1e-12);
        assert!(lr_at(total + 1, total, &cfg).is_err());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = vec![vec![1.0, 2.0], vec![3.0]];
        let mut state = OptimizerState::new();
        optimizer_step(&mut params, &[vec![0.5, -0.5], vec![1.0]], &mut state, 0.1, 0.01).unwrap();
        state.save(dir.path()).unwrap();
        assert_eq!(OptimizerState::load(dir.path()).unwrap(), state);
    }
}
