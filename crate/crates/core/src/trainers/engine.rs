use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{lr_at, optimizer_step, OptimizerState};
use super::{CheckpointEntry, RunManifest, StepRecord, TrainingConfig, CHECKPOINTS_DIR, MANIFEST_FILE, METRICS_FILE};
use crate::error::{Error, Result};
use crate::model::checkpoint::write_json;
use crate::model::{load_model, save_model, TinyLM};
use crate::numerics::{Tape, Tensor, Var};

const OPTIMIZER_DIR: &str = "optimizer";
const TRAINER_STATE_FILE: &str = "trainer_state.json";

/// A set of parameter buffers the engine can optimize and checkpoint.
pub trait Trainable: Sync {
    /// Parameters in a fixed order.
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensor_data_mut(&mut self) -> Vec<&mut [f64]>;
    fn save(&self, dir: &Path) -> Result<()>;
    /// Replace weights with those saved in `dir`.
    fn load_weights(&mut self, dir: &Path) -> Result<()>;

    /// Record every parameter on `tape` as a gradient-tracking leaf.
    fn bind_params(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect()
    }
}

impl Trainable for TinyLM {
    fn tensors(&self) -> Vec<&Tensor> {
        self.params().iter().map(|p| &p.tensor).collect()
    }

    fn tensor_data_mut(&mut self) -> Vec<&mut [f64]> {
        self.param_data_mut()
    }

    fn save(&self, dir: &Path) -> Result<()> {
        save_model(self, dir)
    }

    fn load_weights(&mut self, dir: &Path) -> Result<()> {
        let loaded = load_model(dir)?;
        let (mut a, mut b) = (loaded.config().clone(), self.config().clone());
        // the init seed is irrelevant once weights are replaced
        a.seed = 0;
        b.seed = 0;
        if a != b {
            return Err(Error::Contract(format!(
                "{}: checkpoint config differs from the model being trained",
                dir.display()
            )));
        }
        *self = loaded;
        Ok(())
    }
}

/// Per-sample loss plus scalar diagnostics averaged into the step record.
pub struct SampleOutput {
    pub loss: Var,
    pub metrics: Vec<(&'static str, f64)>,
}

pub(crate) struct StepGradient {
    pub grads: Vec<Vec<f64>>,
    pub loss: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// Mean gradient over `items`. Samples run in parallel; their gradients are
/// summed in item order so the result is independent of scheduling.
pub(crate) fn batch_gradient<M, T, F>(model: &M, items: &[T], f: &F) -> Result<StepGradient>
where
    M: Trainable,
    T: Sync,
    F: Fn(&M, &mut Tape, &[Var], &T) -> Result<SampleOutput> + Sync,
{
    if items.is_empty() {
        return Err(Error::DegenerateBatch("optimizer step without samples".into()));
    }
    let per_sample = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let params = model.bind_params(&mut tape)?;
            let out = f(model, &mut tape, &params, item)?;
            tape.backward(out.loss)?;
            let grads: Vec<Vec<f64>> = params
                .iter()
                .map(|&p| match tape.grad(p) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.value(p).numel()],
                })
                .collect();
            Ok((grads, tape.item(out.loss), out.metrics))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = items.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut grads, mut loss, first_metrics) = iter.next().expect("non-empty batch");
    let mut metrics: BTreeMap<String, f64> = first_metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    for (g, l, m) in iter {
        for (acc, g) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        loss += l;
        for (k, v) in m {
            *metrics.entry(k.to_string()).or_default() += v;
        }
    }
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v /= n);
    }
    metrics.values_mut().for_each(|v| *v /= n);
    Ok(StepGradient {
        grads,
        loss: loss / n,
        metrics,
    })
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    step: usize,
    total_steps: usize,
}

/// Optimizer state, schedule, logging and checkpointing for one run.
pub(crate) struct Session {
    cfg: TrainingConfig,
    optimizer: OptimizerState,
    manifest: RunManifest,
    metrics: BufWriter<fs::File>,
    metrics_path: PathBuf,
    step: usize,
}

impl Session {
    /// Open the output directory, resuming from `cfg.resume_from_checkpoint`
    /// when set.
    pub fn start<M: Trainable>(
        job: &str,
        cfg: &TrainingConfig,
        model: &mut M,
        total_steps: usize,
        config: serde_json::Value,
        dataset_hash: String,
    ) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
        let (optimizer, manifest, step) = match &cfg.resume_from_checkpoint {
            Some(dir) => {
                let state_path = dir.join(TRAINER_STATE_FILE);
                let bytes = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
                let state: TrainerState =
                    serde_json::from_slice(&bytes).map_err(|e| Error::json(&state_path, e))?;
                if state.total_steps != total_steps {
                    return Err(Error::Contract(format!(
                        "checkpoint was taken from a run of {} steps, this run has {total_steps}",
                        state.total_steps
                    )));
                }
                let manifest_path = dir.join(MANIFEST_FILE);
                let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
                let manifest: RunManifest =
                    serde_json::from_slice(&bytes).map_err(|e| Error::json(&manifest_path, e))?;
                if manifest.dataset_hash != dataset_hash {
                    return Err(Error::Contract("resumed run uses a different dataset".into()));
                }
                model.load_weights(dir)?;
                let optimizer = OptimizerState::load(&dir.join(OPTIMIZER_DIR))?;
                log::info!("resuming {job} from step {}", state.step);
                (optimizer, manifest, state.step)
            }
            None => (
                OptimizerState::new(),
                RunManifest {
                    job: job.to_string(),
                    config,
                    dataset_hash,
                    seed: cfg.seed,
                    total_steps,
                    steps: Vec::new(),
                    checkpoints: Vec::new(),
                },
                0,
            ),
        };
        let metrics_path = cfg.output_dir.join(METRICS_FILE);
        let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        let mut session = Self {
            cfg: cfg.clone(),
            optimizer,
            manifest,
            metrics: BufWriter::new(file),
            metrics_path,
            step,
        };
        let replay: Vec<StepRecord> = session.manifest.logged_steps(cfg.logging_steps).cloned().collect();
        for r in &replay {
            session.write_metrics(r)?;
        }
        Ok(session)
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.manifest.total_steps
    }

    fn write_metrics(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record).map_err(|e| Error::json(&self.metrics_path, e))?;
        self.metrics.write_all(b"\n").map_err(|e| Error::io(&self.metrics_path, e))
    }

    /// Apply one optimizer step from a computed gradient.
    pub fn apply<M: Trainable>(&mut self, model: &mut M, grad: StepGradient, epoch: usize) -> Result<()> {
        let step = self.step + 1;
        if !grad.loss.is_finite() || grad.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = lr_at(self.step, self.total_steps(), &self.cfg)?;
        let mut params = model.tensor_data_mut();
        optimizer_step(&mut params, &grad.grads, &mut self.optimizer, lr, self.cfg.weight_decay)?;
        self.step = step;
        let record = StepRecord {
            step,
            epoch,
            lr,
            loss: grad.loss,
            metrics: grad.metrics,
        };
        if step.is_multiple_of(self.cfg.logging_steps) {
            log::info!("{} step {step}/{}: loss {:.6} lr {lr:.3e}", self.manifest.job, self.total_steps(), grad.loss);
            self.write_metrics(&record)?;
        }
        self.manifest.steps.push(record);
        if step.is_multiple_of(self.cfg.save_steps) || step == self.total_steps() {
            self.checkpoint(model)?;
        }
        Ok(())
    }

    fn checkpoint<M: Trainable>(&mut self, model: &M) -> Result<()> {
        let dir = self.cfg.output_dir.join(CHECKPOINTS_DIR).join(format!("step-{}", self.step));
        model.save(&dir)?;
        self.optimizer.save(&dir.join(OPTIMIZER_DIR))?;
        self.manifest.checkpoints.push(CheckpointEntry {
            step: self.step,
            path: Path::new(CHECKPOINTS_DIR).join(format!("step-{}", self.step)),
        });
        write_json(
            &dir.join(TRAINER_STATE_FILE),
            &TrainerState {
                step: self.step,
                total_steps: self.total_steps(),
            },
        )?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest)?;
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))
    }

    /// Save the final model into the output directory and write the manifest.
    pub fn finish<M: Trainable>(mut self, model: &M) -> Result<RunManifest> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        model.save(&self.cfg.output_dir)?;
        write_json(&self.cfg.output_dir.join(MANIFEST_FILE), &self.manifest)?;
        Ok(self.manifest)
    }
}

/// Sample order for `epoch`, fixed by the seed.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Epoch loop shared by the dataset-driven trainers.
pub(crate) fn run_epochs<M, T, F>(session: &mut Session, model: &mut M, cfg: &TrainingConfig, items: &[T], f: F) -> Result<()>
where
    M: Trainable,
    T: Sync,
    F: Fn(&M, &mut Tape, &[Var], &T) -> Result<SampleOutput> + Sync,
{
    let per_epoch = cfg.steps_per_epoch(items.len());
    for epoch in 0..cfg.num_train_epochs {
        let order = epoch_order(items.len(), cfg.seed, epoch);
        for (b, chunk) in order.chunks(cfg.effective_batch()).enumerate() {
            let step = epoch * per_epoch + b + 1;
            if step <= session.step() {
                continue;
            }
            let batch: Vec<&T> = chunk.iter().map(|&i| &items[i]).collect();
            let grad = batch_gradient(&*model, &batch, &|m: &M, tape: &mut Tape, p: &[Var], item: &&T| f(m, tape, p, item))
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                    other => other,
                })?;
            session.apply(model, grad, epoch)?;
        }
    }
    Ok(())
}
