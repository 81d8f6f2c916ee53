//! Job dispatch: a parsed [`JobConfig`] becomes a sequence of stages, each
//! skipped when a previous run recorded the same inputs and its outputs are
//! still intact.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{parse_config, Diagnostic, JobConfig, JobType, RewardSpec};
use crate::error::{Error, Result};
use crate::model::{load_model, load_model_config, ChatTemplate, TinyLM};
use crate::objectives::DistillSpec;
use crate::records::{read_json_array, read_topk_file, write_json_array, CoTRecord, InstructionRecord, LabeledRecord, PreferenceRecord};
use crate::synthesis::{self, SynthesisJob, SynthesisReport};
use crate::teacher::{annotate_api, annotate_local, export_topk_logits, Annotation, ApiClient, LocalTeacher, TeacherClient};
use crate::trainers::{
    content_hash, load_reward_model, train_dpo, train_grpo, train_reward_model, train_sft, train_white_box, ContainsReward,
    ModelReward, RewardFn, RewardModel, SequenceFormat, TrainingConfig, CHECKPOINTS_DIR,
};

/// Stage records, kept in the training output directory.
pub const STAGES_FILE: &str = "stages.json";
/// Redacted copy of the configuration a run used.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const SYNTHESIS_REPORT_FILE: &str = "synthesis_report.json";

/// Files that live next to stage outputs but never count toward their hash.
const BOOKKEEPING: [&str; 2] = [STAGES_FILE, RESOLVED_CONFIG_FILE];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Annotate,
    ExportLogits,
    Train,
    Synthesize,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Annotate => "annotate",
            Self::ExportLogits => "export_logits",
            Self::Train => "train",
            Self::Synthesize => "synthesize",
        }
    }
}

/// One step of a job with the files it reads and writes.
#[derive(Clone, Debug)]
pub struct PlannedStage {
    pub kind: StageKind,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Config values that influence the outputs besides the input files.
    pub settings: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: StageKind,
    pub status: StageStatus,
    pub outputs: Vec<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub job: JobType,
    pub stages: Vec<StageOutcome>,
}

impl RunReport {
    pub fn recomputed(&self) -> usize {
        self.stages.iter().filter(|s| s.status == StageStatus::Ran).count()
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "job {}", self.job.as_str())?;
        for s in &self.stages {
            let status = match s.status {
                StageStatus::Ran => "done",
                StageStatus::Cached => "skipped (cached)",
            };
            writeln!(f, "  {}: {status}", s.stage.as_str())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    /// Output path as configured, mapped to its content hash.
    outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct StageCache {
    stages: BTreeMap<String, StageRecord>,
}

/// A configuration bound to the directory its relative paths resolve
/// against.
pub struct Pipeline {
    config: JobConfig,
    base_dir: PathBuf,
}

/// Parse a config file; relative paths resolve against its directory.
pub fn load_pipeline(path: &Path) -> Result<(Pipeline, Vec<Diagnostic>)> {
    let parsed = parse_config(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((Pipeline::new(parsed.config, base), parsed.diagnostics))
}

impl Pipeline {
    pub fn new(config: JobConfig, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            base_dir: base_dir.into(),
        }
    }

    pub fn config(&self) -> &JobConfig {
        &self.config
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn dataset_path(&self, p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        p.as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::config("dataset", key, "missing required key for this job_type"))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.training.output_dir)
    }

    fn training(&self) -> TrainingConfig {
        let mut t = self.config.training.clone();
        t.output_dir = self.output_dir();
        t.resume_from_checkpoint = t.resume_from_checkpoint.as_deref().map(|p| self.resolve(p));
        t
    }

    fn max_seq_length(&self) -> usize {
        self.config
            .distillation
            .as_ref()
            .map_or(DistillSpec::default().max_seq_length, |d| d.max_seq_length)
    }

    fn stages_path(&self) -> PathBuf {
        self.output_dir().join(STAGES_FILE)
    }

    /// Whether labels must be produced before white-box export: yes when the
    /// labeled file is missing or was written by an earlier run of this job.
    fn white_box_needs_labels(&self) -> bool {
        let c = &self.config;
        if c.dataset.instruction_path.is_none() {
            return false;
        }
        let labeled_exists = c.dataset.labeled_path.as_deref().is_some_and(|p| self.resolve(p).exists());
        !labeled_exists || self.load_cache().stages.contains_key(StageKind::Annotate.as_str())
    }

    /// Stages this job runs, in order.
    pub fn plan(&self) -> Vec<PlannedStage> {
        let c = &self.config;
        let d = &c.dataset;
        let opt = |p: &Option<PathBuf>| p.iter().map(|p| self.resolve(p)).collect::<Vec<_>>();
        let template = opt(&d.template);
        let teacher = opt(&c.models.teacher);
        let inference_settings = json!({
            "inference": c.inference.content_hash(),
            "system_prompt": c.inference.system_prompt,
        });
        let train_settings = {
            let v = c.redacted();
            json!({
                "training": c.training.portable(),
                "distillation": v.get("distillation"),
                "dpo": v.get("dpo"),
                "grpo": v.get("grpo"),
                "model_config": v.pointer("/models/model_config"),
                "system_prompt": c.inference.system_prompt,
            })
        };
        let student_inputs = [opt(&c.models.student), opt(&c.models.reference), opt(&c.models.reward)].concat();
        let annotate = |teacher: &[PathBuf]| PlannedStage {
            kind: StageKind::Annotate,
            inputs: [opt(&d.instruction_path), template.clone(), teacher.to_vec()].concat(),
            outputs: opt(&d.labeled_path),
            settings: inference_settings.clone(),
        };
        let train = |data: Vec<PathBuf>| PlannedStage {
            kind: StageKind::Train,
            inputs: [data, template.clone(), student_inputs.clone()].concat(),
            outputs: vec![self.output_dir()],
            settings: train_settings.clone(),
        };
        match c.job_type {
            JobType::BlackBoxKdApi => vec![annotate(&[]), train(opt(&d.labeled_path))],
            JobType::BlackBoxKdLocal => vec![annotate(&teacher), train(opt(&d.labeled_path))],
            JobType::WhiteBoxKdLocal => {
                let mut stages = Vec::new();
                if self.white_box_needs_labels() {
                    stages.push(annotate(&teacher));
                }
                stages.push(PlannedStage {
                    kind: StageKind::ExportLogits,
                    inputs: [opt(&d.labeled_path), template.clone(), teacher.clone()].concat(),
                    outputs: opt(&d.logits_path),
                    settings: json!({
                        "distillation": c.distillation.as_ref().map(|s| serde_json::to_value(s).expect("serializable")),
                        "system_prompt": c.inference.system_prompt,
                    }),
                });
                stages.push(train([opt(&d.labeled_path), opt(&d.logits_path)].concat()));
                stages
            }
            JobType::Dpo | JobType::RewardModel => vec![train(opt(&d.preference_path))],
            JobType::Grpo => vec![train(opt(&d.instruction_path))],
            job => {
                let data = match job {
                    JobType::SynthExpand | JobType::SynthRefine => opt(&d.instruction_path),
                    JobType::SynthPairs => opt(&d.text_path),
                    JobType::CotGenerate => [opt(&d.instruction_path), opt(&d.labeled_path)].concat(),
                    _ => opt(&d.cot_path),
                };
                let prompt = c.synthesis.as_ref().map(|s| opt(&s.prompt_template)).unwrap_or_default();
                let section = c.redacted().get("synthesis").cloned();
                vec![PlannedStage {
                    kind: StageKind::Synthesize,
                    inputs: [data, prompt, template.clone(), teacher.clone()].concat(),
                    outputs: [opt(&d.output_path), vec![self.output_dir().join(SYNTHESIS_REPORT_FILE)]].concat(),
                    settings: json!({"synthesis": section, "teacher": inference_settings.clone()}),
                }]
            }
        }
    }

    /// Human-readable plan for `--dry-run`. Reads only local files.
    pub fn describe(&self) -> String {
        let cache = self.load_cache();
        let mut out = format!("job {}\n", self.config.job_type.as_str());
        for (i, stage) in self.plan().iter().enumerate() {
            let cached = self.is_cached(stage, &cache).unwrap_or(false);
            out.push_str(&format!(
                "stage {} {}{}\n",
                i + 1,
                stage.kind.as_str(),
                if cached { " (cached)" } else { "" }
            ));
            for p in &stage.inputs {
                out.push_str(&format!("  in  {}\n", p.display()));
            }
            for p in &stage.outputs {
                out.push_str(&format!("  out {}\n", p.display()));
            }
        }
        out.push_str("resolved config:\n");
        out.push_str(&serde_json::to_string_pretty(&self.config.redacted()).expect("serializable"));
        out.push('\n');
        out
    }

    fn load_cache(&self) -> StageCache {
        fs::read(self.stages_path())
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    fn save_cache(&self, cache: &StageCache) -> Result<()> {
        let path = self.stages_path();
        let mut text = serde_json::to_string_pretty(cache).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Path as written in the config where possible, so records do not
    /// depend on where the run happens.
    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.base_dir).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn stage_key(&self, stage: &PlannedStage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.kind.as_str());
        h.update([0]);
        h.update(stage.settings.to_string());
        for input in &stage.inputs {
            h.update([0]);
            h.update(self.display_path(input));
            h.update([0]);
            h.update(if input.exists() { hash_path(input)? } else { "absent".to_string() });
        }
        Ok(hex::encode(h.finalize()))
    }

    fn is_cached(&self, stage: &PlannedStage, cache: &StageCache) -> Result<bool> {
        let Some(record) = cache.stages.get(stage.kind.as_str()) else {
            return Ok(false);
        };
        if record.key != self.stage_key(stage)? || record.outputs.len() != stage.outputs.len() {
            return Ok(false);
        }
        for out in &stage.outputs {
            let expected = record.outputs.get(&self.display_path(out));
            if !out.exists() || expected != Some(&hash_path(out)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Execute every stage in order, skipping those with intact outputs.
    pub fn run(&self) -> Result<RunReport> {
        let out_dir = self.output_dir();
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let resolved = out_dir.join(RESOLVED_CONFIG_FILE);
        let mut text = serde_json::to_string_pretty(&self.config.redacted()).expect("serializable");
        text.push('\n');
        fs::write(&resolved, text).map_err(|e| Error::io(&resolved, e))?;

        let mut cache = self.load_cache();
        let mut report = RunReport {
            job: self.config.job_type,
            stages: Vec::new(),
        };
        for stage in self.plan() {
            let name = stage.kind.as_str();
            if self.is_cached(&stage, &cache)? {
                log::info!("stage {name}: skipped (cached)");
                report.stages.push(StageOutcome {
                    stage: stage.kind,
                    status: StageStatus::Cached,
                    outputs: stage.outputs.clone(),
                });
                continue;
            }
            log::info!("stage {name}: running");
            let key = self.stage_key(&stage)?;
            cache.stages.remove(name);
            self.save_cache(&cache)?;
            if let Err(source) = self.execute(stage.kind) {
                return Err(Error::Stage {
                    stage: name.to_string(),
                    partial: stage.outputs.iter().filter(|p| p.exists()).cloned().collect(),
                    source: Box::new(source),
                });
            }
            let mut outputs = BTreeMap::new();
            for out in &stage.outputs {
                outputs.insert(self.display_path(out), hash_path(out)?);
            }
            cache.stages.insert(name.to_string(), StageRecord { key, outputs });
            self.save_cache(&cache)?;
            report.stages.push(StageOutcome {
                stage: stage.kind,
                status: StageStatus::Ran,
                outputs: stage.outputs,
            });
        }
        Ok(report)
    }

    fn execute(&self, kind: StageKind) -> Result<()> {
        match kind {
            StageKind::Annotate => self.annotate(),
            StageKind::ExportLogits => self.export_logits(),
            StageKind::Train => self.train(),
            StageKind::Synthesize => self.synthesize(),
        }
    }

    fn template(&self) -> Result<ChatTemplate> {
        match &self.config.dataset.template {
            None => Ok(ChatTemplate::default()),
            Some(p) => {
                let path = self.resolve(p);
                if !path.exists() {
                    return Err(Error::config("dataset", "template", format!("{} does not exist", path.display())));
                }
                ChatTemplate::load(&path)
            }
        }
    }

    fn teacher_dir(&self) -> Result<PathBuf> {
        let p = self.config.models.teacher.as_deref().ok_or_else(|| Error::config("models", "teacher", "missing required key"))?;
        Ok(self.resolve(p))
    }

    fn format(&self) -> Result<SequenceFormat> {
        Ok(SequenceFormat::new(
            self.template()?,
            self.config.inference.system_prompt.clone(),
            self.max_seq_length(),
        ))
    }

    /// Existing student checkpoint, or a fresh model from
    /// `models.model_config`.
    fn student(&self) -> Result<TinyLM> {
        let models = &self.config.models;
        let dir = self.resolve(models.student.as_deref().ok_or_else(|| Error::config("models", "student", "missing required key"))?);
        if dir.exists() {
            return load_model(&dir);
        }
        match &models.model_config {
            Some(cfg) => {
                log::info!("initializing student from models.model_config ({} does not exist)", dir.display());
                TinyLM::init(cfg.clone())
            }
            None => Err(Error::config(
                "models",
                "student",
                format!("{} does not exist and models.model_config is not set", dir.display()),
            )),
        }
    }

    fn optional_model(&self, p: &Option<PathBuf>) -> Result<Option<TinyLM>> {
        p.as_deref().map(|p| load_model(&self.resolve(p))).transpose()
    }

    fn annotate(&self) -> Result<()> {
        let c = &self.config;
        let instructions: Vec<InstructionRecord> = read_json_array(&self.dataset_path(&c.dataset.instruction_path, "instruction_path")?)?;
        let template = self.template()?;
        let annotations = match c.job_type {
            JobType::BlackBoxKdApi => annotate_api(&instructions, &c.effective_inference())?,
            _ => annotate_local(&instructions, &self.teacher_dir()?, &template, &c.inference)?,
        };
        let labeled: Vec<LabeledRecord> = annotations.iter().filter_map(Annotation::labeled).cloned().collect();
        let failed = annotations.len() - labeled.len();
        if failed > 0 {
            log::warn!("{failed} of {} instructions could not be labeled", annotations.len());
        }
        if labeled.is_empty() && !instructions.is_empty() {
            return Err(Error::EmptyDataset("the teacher labeled none of the instructions".into()));
        }
        write_json_array(&self.dataset_path(&c.dataset.labeled_path, "labeled_path")?, &labeled)
    }

    fn export_logits(&self) -> Result<()> {
        let c = &self.config;
        let teacher = load_model(&self.teacher_dir()?)?;
        let labeled: Vec<LabeledRecord> = read_json_array(&self.dataset_path(&c.dataset.labeled_path, "labeled_path")?)?;
        let spec = c.distillation.clone().unwrap_or_default();
        let k = if spec.top_k == 0 { teacher.config().vocab_size } else { spec.top_k };
        let summary = export_topk_logits(
            &teacher,
            &labeled,
            k,
            spec.max_seq_length,
            &self.template()?,
            &c.inference.system_prompt,
            &self.dataset_path(&c.dataset.logits_path, "logits_path")?,
        )?;
        log::info!(
            "exported {} positions over {} samples, mean top-{k} mass {:.4}",
            summary.positions,
            summary.records,
            summary.mean_topk_mass
        );
        Ok(())
    }

    fn train(&self) -> Result<()> {
        let c = &self.config;
        let d = &c.dataset;
        let cfg = self.training();
        if cfg.resume_from_checkpoint.is_none() {
            // stale checkpoints from an earlier configuration would linger
            let stale = cfg.output_dir.join(CHECKPOINTS_DIR);
            if stale.exists() {
                fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        let format = self.format()?;
        let manifest = match c.job_type {
            JobType::BlackBoxKdApi | JobType::BlackBoxKdLocal => {
                let data: Vec<LabeledRecord> = read_json_array(&self.dataset_path(&d.labeled_path, "labeled_path")?)?;
                train_sft(&mut self.student()?, &data, &cfg, &format)?
            }
            JobType::WhiteBoxKdLocal => {
                let data: Vec<LabeledRecord> = read_json_array(&self.dataset_path(&d.labeled_path, "labeled_path")?)?;
                let logits = read_topk_file(&self.dataset_path(&d.logits_path, "logits_path")?)?;
                let spec = c.distillation.clone().unwrap_or_default();
                let mut student = self.student()?;
                // token-level divergence needs one shared vocabulary
                let teacher_vocab = load_model_config(&self.teacher_dir()?)?.vocab_size;
                if teacher_vocab != student.config().vocab_size {
                    return Err(Error::config(
                        "models",
                        "student",
                        format!(
                            "vocabulary of {} tokens differs from the teacher's {teacher_vocab}",
                            student.config().vocab_size
                        ),
                    ));
                }
                train_white_box(&mut student, &data, &logits, &spec, &cfg, &format)?
            }
            JobType::Dpo => {
                let data: Vec<PreferenceRecord> = read_json_array(&self.dataset_path(&d.preference_path, "preference_path")?)?;
                let reference = self.optional_model(&c.models.reference)?;
                let beta = c.dpo.as_ref().map_or(0.1, |b| b.beta);
                train_dpo(&mut self.student()?, reference.as_ref(), &data, beta, &cfg, &format)?
            }
            JobType::RewardModel => {
                let data: Vec<PreferenceRecord> = read_json_array(&self.dataset_path(&d.preference_path, "preference_path")?)?;
                let mut model = RewardModel::new(self.student()?);
                train_reward_model(&mut model, &data, &cfg, &format)?
            }
            JobType::Grpo => {
                let prompts: Vec<InstructionRecord> = read_json_array(&self.dataset_path(&d.instruction_path, "instruction_path")?)?;
                let section = c.grpo.as_ref().ok_or_else(|| Error::config("", "grpo", "missing required section"))?;
                let reward: Box<dyn RewardFn> = match &section.reward {
                    RewardSpec::Contains { target } => Box::new(ContainsReward { target: target.clone() }),
                    RewardSpec::Model => {
                        let dir = c.models.reward.as_deref().ok_or_else(|| Error::config("models", "reward", "missing required key"))?;
                        Box::new(ModelReward {
                            model: load_reward_model(&self.resolve(dir))?,
                            format: format.clone(),
                        })
                    }
                };
                let reference = self.optional_model(&c.models.reference)?;
                train_grpo(&mut self.student()?, reference.as_ref(), &prompts, reward.as_ref(), &section.config, &cfg, &format)?
            }
            other => return Err(Error::Contract(format!("{} has no training stage", other.as_str()))),
        };
        log::info!("{} finished after {} steps", manifest.job, manifest.total_steps);
        Ok(())
    }

    fn synthesize(&self) -> Result<()> {
        let c = &self.config;
        let d = &c.dataset;
        let op = c.job_type.synthesis_operator().ok_or_else(|| Error::Contract("not a synthesis job".into()))?;
        let section = c.synthesis.clone().unwrap_or_default();
        let local: Option<LocalTeacher> = match &c.models.teacher {
            Some(_) => Some(LocalTeacher::new(load_model(&self.teacher_dir()?)?, self.template()?, &c.inference)),
            None => None,
        };
        let api = match local {
            Some(_) => None,
            None => Some(ApiClient::new(&c.effective_inference())?),
        };
        let client: &dyn TeacherClient = match (&local, &api) {
            (Some(l), _) => l,
            (None, Some(a)) => a,
            (None, None) => unreachable!("one teacher is always built"),
        };

        let mut job = SynthesisJob::with_grounding(op, section.grounded);
        if let Some(p) = &section.prompt_template {
            let path = self.resolve(p);
            let source = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            job.set_template(&source)
                .map_err(|e| Error::config("synthesis", "prompt_template", e.to_string()))?;
        }
        job.fan_out = section.fan_out;
        job.dedup_threshold = section.dedup_threshold;
        job.cot_begin = section.cot_begin;
        job.cot_end = section.cot_end;
        job.system_prompt = c.inference.system_prompt.clone();
        job.concurrency = c.inference.concurrency;
        job.max_model_len = c
            .inference
            .max_model_len
            .or_else(|| local.as_ref().map(|l| l.model().config().max_seq_len))
            .unwrap_or(job.max_model_len);

        let output = self.dataset_path(&d.output_path, "output_path")?;
        let report: SynthesisReport = match op {
            synthesis::SynthesisOperator::Expand | synthesis::SynthesisOperator::Refine => {
                let seeds: Vec<InstructionRecord> = read_json_array(&self.dataset_path(&d.instruction_path, "instruction_path")?)?;
                let out = if op == synthesis::SynthesisOperator::Expand {
                    synthesis::expand_instructions(&seeds, &job, client)?
                } else {
                    synthesis::refine_instructions(&seeds, &job, client)?
                };
                write_json_array(&output, &out.records)?;
                out.report
            }
            synthesis::SynthesisOperator::PairsFromText => {
                let path = self.dataset_path(&d.text_path, "text_path")?;
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let docs: Vec<String> = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
                let out = synthesis::pairs_from_text(&docs, &job, client)?;
                write_json_array(&output, &out.records)?;
                out.report
            }
            synthesis::SynthesisOperator::CotGenerate => {
                let inputs: Vec<LabeledRecord> = match (&d.instruction_path, section.grounded) {
                    (Some(p), false) => read_json_array::<InstructionRecord>(&self.resolve(p))?
                        .into_iter()
                        .map(|r| LabeledRecord::new(r.instruction, ""))
                        .collect(),
                    _ => read_json_array(&self.dataset_path(&d.labeled_path, "labeled_path")?)?,
                };
                let out = synthesis::cot_generate(&inputs, &job, client)?;
                write_json_array(&output, &out.records)?;
                out.report
            }
            synthesis::SynthesisOperator::CotSimplify | synthesis::SynthesisOperator::CotExtend => {
                let cots: Vec<CoTRecord> = read_json_array(&self.dataset_path(&d.cot_path, "cot_path")?)?;
                let out = if op == synthesis::SynthesisOperator::CotSimplify {
                    synthesis::cot_simplify(&cots, &job, client)?
                } else {
                    synthesis::cot_extend(&cots, &job, client)?
                };
                write_json_array(&output, &out.records)?;
                out.report
            }
        };
        for w in &report.warnings {
            log::warn!("{w}");
        }
        let path = self.output_dir().join(SYNTHESIS_REPORT_FILE);
        let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Content hash of a file, or of a directory tree by relative path and file
/// hash. Bookkeeping files are left out.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(content_hash(&bytes));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let full = path.join(&rel);
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(content_hash(&bytes));
        h.update(*b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if !(dir == root && BOOKKEEPING.iter().any(|b| entry.file_name() == *b)) {
            out.push(path.strip_prefix(root).expect("walked below root").to_path_buf());
        }
    }
    Ok(())
}
