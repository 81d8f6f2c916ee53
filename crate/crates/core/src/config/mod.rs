//! Job configuration: tolerant parsing, typed extraction with diagnostics,
//! and serialization back to strict JSON.

mod relaxed;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{DistillSpec, DistillationType};
use crate::synthesis::{SynthesisOperator, DEFAULT_COT_BEGIN, DEFAULT_COT_END, DEFAULT_DEDUP_THRESHOLD};
use crate::teacher::{BackendFlags, InferenceConfig, InferenceMode, Secret};
use crate::trainers::{GrpoConfig, LrSchedulerType, TrainingConfig};

pub use relaxed::{parse_relaxed, RelaxedDocument};

/// Environment variable that overrides `inference.api_key`.
pub const API_KEY_ENV: &str = "ED_API_KEY";

/// Members substituted when a section elides them with `...`.
pub const ELIDED_DEFAULTS: &str = r#"{
  "dataset": {
    "instruction_path": "train.json",
    "labeled_path": "train_labeled.json",
    "template": "chat_template.jinja",
    "seed": 42
  },
  "inference": {
    "base_url": "ENDPOINT",
    "api_key": "TOKEN",
    "stream": "true",
    "system_prompt": "You are a helpful assistant.",
    "max_new_tokens": 512
  },
  "models": {
    "student": "student/Qwen/Qwen2.5-0.5B-Instruct/"
  },
  "training": {
    "output_dir": "result/",
    "num_train_epochs": 3,
    "per_device_train_batch_size": 1,
    "gradient_accumulation_steps": 8,
    "save_steps": 1000,
    "logging_steps": 1,
    "learning_rate": 2e-5,
    "weight_decay": 0.05,
    "warmup_ratio": 0.1,
    "lr_scheduler_type": "cosine"
  }
}"#;

/// Keys accepted for compatibility with vLLM-style serving configs. They
/// are kept but have no effect on the built-in engine.
pub const BACKEND_FLAGS: &[&str] = &["enable_chunked_prefill", "gpu_memory_utilization", "trust_remote_code", "enforce_eager"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum JobType {
    BlackBoxKdApi,
    BlackBoxKdLocal,
    WhiteBoxKdLocal,
    Dpo,
    RewardModel,
    Grpo,
    SynthExpand,
    SynthRefine,
    SynthPairs,
    CotGenerate,
    CotSimplify,
    CotExtend,
}

impl JobType {
    pub const ALL: [JobType; 12] = [
        Self::BlackBoxKdApi,
        Self::BlackBoxKdLocal,
        Self::WhiteBoxKdLocal,
        Self::Dpo,
        Self::RewardModel,
        Self::Grpo,
        Self::SynthExpand,
        Self::SynthRefine,
        Self::SynthPairs,
        Self::CotGenerate,
        Self::CotSimplify,
        Self::CotExtend,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::BlackBoxKdApi => "black_box_kd_api",
            Self::BlackBoxKdLocal => "black_box_kd_local",
            Self::WhiteBoxKdLocal => "white_box_kd_local",
            Self::Dpo => "dpo",
            Self::RewardModel => "reward_model",
            Self::Grpo => "grpo",
            Self::SynthExpand => "synth_expand",
            Self::SynthRefine => "synth_refine",
            Self::SynthPairs => "synth_pairs",
            Self::CotGenerate => "cot_generate",
            Self::CotSimplify => "cot_simplify",
            Self::CotExtend => "cot_extend",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|j| j.as_str() == s)
    }

    /// Synthesis operator run by this job, if any.
    pub fn synthesis_operator(self) -> Option<SynthesisOperator> {
        match self {
            Self::SynthExpand => Some(SynthesisOperator::Expand),
            Self::SynthRefine => Some(SynthesisOperator::Refine),
            Self::SynthPairs => Some(SynthesisOperator::PairsFromText),
            Self::CotGenerate => Some(SynthesisOperator::CotGenerate),
            Self::CotSimplify => Some(SynthesisOperator::CotSimplify),
            Self::CotExtend => Some(SynthesisOperator::CotExtend),
            _ => None,
        }
    }

    pub fn trains_student(self) -> bool {
        self.synthesis_operator().is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetConfig {
    pub instruction_path: Option<PathBuf>,
    pub labeled_path: Option<PathBuf>,
    pub logits_path: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub preference_path: Option<PathBuf>,
    /// JSON array of raw documents (strings).
    pub text_path: Option<PathBuf>,
    pub cot_path: Option<PathBuf>,
    /// Where synthesis jobs write their records.
    pub output_path: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelsConfig {
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub reward: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    /// Shape used to initialize a student whose directory does not exist yet.
    pub model_config: Option<ModelConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RewardSpec {
    /// 1 when the completion contains `target`, else 0.
    Contains { target: String },
    /// Score with the reward model at `models.reward`.
    Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrpoSection {
    pub config: GrpoConfig,
    pub reward: RewardSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisSection {
    pub prompt_template: Option<PathBuf>,
    pub fan_out: usize,
    pub dedup_threshold: f64,
    pub cot_begin: String,
    pub cot_end: String,
    pub grounded: bool,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            prompt_template: None,
            fan_out: 1,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            cot_begin: DEFAULT_COT_BEGIN.into(),
            cot_end: DEFAULT_COT_END.into(),
            grounded: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobConfig {
    pub job_type: JobType,
    pub dataset: DatasetConfig,
    pub inference: InferenceConfig,
    pub distillation: Option<DistillSpec>,
    pub models: ModelsConfig,
    pub training: TrainingConfig,
    pub dpo: Option<DpoConfig>,
    pub grpo: Option<GrpoSection>,
    pub synthesis: Option<SynthesisSection>,
    /// Unrecognized keys by section (`""` for top level), kept verbatim.
    pub unknown: BTreeMap<String, BTreeMap<String, Value>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Notice,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedConfig {
    pub config: JobConfig,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParsedConfig {
    pub fn warnings(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Warning)
    }
}

/// Read and parse a job config file.
pub fn parse_config(path: &Path) -> Result<ParsedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ParsedConfig> {
    let doc = parse_relaxed(text)?;
    let Value::Object(mut root) = doc.value else {
        return Err(Error::config("", "job_type", "the config must be a JSON object"));
    };
    let defaults: Value = serde_json::from_str(ELIDED_DEFAULTS).expect("defaults are valid JSON");
    for pointer in &doc.ellipsized {
        let section = pointer.trim_start_matches('/');
        if let (Some(Value::Object(target)), Some(Value::Object(fill))) = (root.get_mut(section), defaults.get(section)) {
            log::debug!("filling elided members of {section}");
            for (k, v) in fill {
                target.entry(k.clone()).or_insert_with(|| v.clone());
            }
        }
    }
    let mut ex = Extractor::default();
    let config = ex.job(&mut root)?;
    config.validate()?;
    Ok(ParsedConfig {
        config,
        diagnostics: ex.diagnostics,
    })
}

#[derive(Default)]
struct Extractor {
    diagnostics: Vec<Diagnostic>,
    unknown: BTreeMap<String, BTreeMap<String, Value>>,
}

/// Typed access to one config section; consumed keys are removed so the
/// leftovers can be reported.
struct Section {
    name: &'static str,
    map: Map<String, Value>,
}

fn type_error(section: &str, key: &str, expected: &str, got: &Value) -> Error {
    Error::config(section, key, format!("expected {expected}, found {got}"))
}

impl Section {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key).filter(|v| !v.is_null())
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(type_error(self.name, key, "a string", &v)),
        }
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }

    fn uint(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| type_error(self.name, key, "a non-negative integer", &v)),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.uint(key)?.map(|v| v as usize))
    }

    fn float(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| type_error(self.name, key, "a number", &v)),
        }
    }

    /// Booleans may be bare or quoted (`true` / `"true"`).
    fn boolean(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(b)),
            Some(Value::String(s)) if s == "true" => Ok(Some(true)),
            Some(Value::String(s)) if s == "false" => Ok(Some(false)),
            Some(v) => Err(type_error(self.name, key, "a boolean", &v)),
        }
    }

    fn object(&mut self, key: &str) -> Result<Option<Map<String, Value>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Object(m)) => Ok(Some(m)),
            Some(v) => Err(type_error(self.name, key, "an object", &v)),
        }
    }
}

impl Extractor {
    fn section(&mut self, root: &mut Map<String, Value>, name: &'static str) -> Result<Option<Section>> {
        match root.remove(name) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Object(map)) => Ok(Some(Section { name, map })),
            Some(v) => Err(type_error("", name, "an object", &v)),
        }
    }

    fn finish(&mut self, section: Section) {
        for (key, value) in section.map {
            let qualified = if section.name.is_empty() {
                key.clone()
            } else {
                format!("{}.{key}", section.name)
            };
            self.diagnostics.push(Diagnostic {
                severity: Severity::Warning,
                message: format!("unknown key {qualified} (kept, not used)"),
            });
            self.unknown.entry(section.name.to_string()).or_default().insert(key, value);
        }
    }

    fn notice(&mut self, message: String) {
        self.diagnostics.push(Diagnostic {
            severity: Severity::Notice,
            message,
        });
    }

    fn job(&mut self, root: &mut Map<String, Value>) -> Result<JobConfig> {
        let job_type = match root.remove("job_type") {
            None => return Err(Error::config("", "job_type", "missing required key")),
            Some(Value::String(s)) => JobType::parse(&s).ok_or(Error::UnknownJobType(s))?,
            Some(v) => return Err(type_error("", "job_type", "a string", &v)),
        };
        let dataset = self.dataset(root)?;
        let mut inference = self.inference(root, dataset.seed)?;
        let distillation = self.distillation(root)?;
        let models = self.models(root)?;
        inference.mode = inference_mode(job_type, &inference, models.teacher.is_some());
        let training = self.training(root, dataset.seed)?;
        let dpo = match self.section(root, "dpo")? {
            None => None,
            Some(mut s) => {
                let beta = s.float("beta")?.unwrap_or(0.1);
                self.finish(s);
                Some(DpoConfig { beta })
            }
        };
        let grpo = self.grpo(root, &inference)?;
        let synthesis = self.synthesis(root)?;
        self.finish(Section {
            name: "",
            map: std::mem::take(root),
        });
        Ok(JobConfig {
            job_type,
            dataset,
            inference,
            distillation,
            models,
            training,
            dpo,
            grpo,
            synthesis,
            unknown: std::mem::take(&mut self.unknown),
        })
    }

    fn dataset(&mut self, root: &mut Map<String, Value>) -> Result<DatasetConfig> {
        let Some(mut s) = self.section(root, "dataset")? else {
            return Ok(DatasetConfig {
                seed: 42,
                ..DatasetConfig::default()
            });
        };
        let d = DatasetConfig {
            instruction_path: s.path("instruction_path")?,
            labeled_path: s.path("labeled_path")?,
            logits_path: s.path("logits_path")?,
            template: s.path("template")?,
            preference_path: s.path("preference_path")?,
            text_path: s.path("text_path")?,
            cot_path: s.path("cot_path")?,
            output_path: s.path("output_path")?,
            seed: s.uint("seed")?.unwrap_or(42),
        };
        self.finish(s);
        Ok(d)
    }

    fn inference(&mut self, root: &mut Map<String, Value>, seed: u64) -> Result<InferenceConfig> {
        let mut cfg = InferenceConfig::new(InferenceMode::Local);
        cfg.seed = seed;
        let Some(mut s) = self.section(root, "inference")? else {
            return Ok(cfg);
        };
        cfg.base_url = s.string("base_url")?;
        cfg.api_key = s.string("api_key")?.map(Secret::new);
        cfg.model = s.string("model")?;
        cfg.stream = s.boolean("stream")?.unwrap_or(false);
        if let Some(p) = s.string("system_prompt")? {
            cfg.system_prompt = p;
        }
        if let Some(n) = s.usize("max_new_tokens")? {
            cfg.max_new_tokens = n;
        }
        cfg.temperature = s.float("temperature")?;
        if let Some(v) = s.uint("seed")? {
            cfg.seed = v;
        }
        cfg.max_model_len = s.usize("max_model_len")?;
        if let Some(c) = s.usize("concurrency")? {
            cfg.concurrency = c;
        }
        if let Some(n) = s.uint("retry_attempts")? {
            cfg.retry.attempts = n as u32;
        }
        if let Some(ms) = s.uint("retry_base_delay_ms")? {
            cfg.retry.base_delay_ms = ms;
        }
        cfg.backend = BackendFlags {
            gpu_memory_utilization: s.float("gpu_memory_utilization")?,
            enable_chunked_prefill: s.boolean("enable_chunked_prefill")?,
            trust_remote_code: s.boolean("trust_remote_code")?,
            enforce_eager: s.boolean("enforce_eager")?,
        };
        let flags: Vec<&str> = [
            ("enable_chunked_prefill", cfg.backend.enable_chunked_prefill.is_some()),
            ("gpu_memory_utilization", cfg.backend.gpu_memory_utilization.is_some()),
            ("trust_remote_code", cfg.backend.trust_remote_code.is_some()),
            ("enforce_eager", cfg.backend.enforce_eager.is_some()),
        ]
        .into_iter()
        .filter_map(|(k, set)| set.then_some(k))
        .collect();
        if !flags.is_empty() {
            self.notice(format!(
                "serving-backend flags accepted without effect on the built-in engine: inference.{}",
                flags.join(", inference.")
            ));
        }
        self.finish(s);
        Ok(cfg)
    }

    fn distillation(&mut self, root: &mut Map<String, Value>) -> Result<Option<DistillSpec>> {
        let Some(mut s) = self.section(root, "distillation")? else {
            return Ok(None);
        };
        let mut spec = DistillSpec::default();
        if let Some(r) = s.float("kd_ratio")? {
            spec.kd_ratio = r;
        }
        if let Some(n) = s.usize("max_seq_length")? {
            spec.max_seq_length = n;
        }
        if let Some(t) = s.string("distillation_type")? {
            spec.distillation_type = DistillationType::parse(&t).ok_or_else(|| {
                Error::config("distillation", "distillation_type", format!("{t:?} is not forward_kld or reverse_kld"))
            })?;
        }
        if let Some(k) = s.usize("top_k")? {
            spec.top_k = k;
        }
        self.finish(s);
        Ok(Some(spec))
    }

    fn models(&mut self, root: &mut Map<String, Value>) -> Result<ModelsConfig> {
        let Some(mut s) = self.section(root, "models")? else {
            return Ok(ModelsConfig::default());
        };
        let model_config = match s.object("model_config")? {
            None => None,
            Some(m) => Some(
                serde_json::from_value::<ModelConfig>(Value::Object(m))
                    .map_err(|e| Error::config("models", "model_config", e.to_string()))?,
            ),
        };
        let m = ModelsConfig {
            teacher: s.path("teacher")?,
            student: s.path("student")?,
            reward: s.path("reward")?,
            reference: s.path("reference")?,
            model_config,
        };
        self.finish(s);
        Ok(m)
    }

    fn training(&mut self, root: &mut Map<String, Value>, seed: u64) -> Result<TrainingConfig> {
        let mut t = TrainingConfig {
            seed,
            ..TrainingConfig::default()
        };
        let Some(mut s) = self.section(root, "training")? else {
            return Ok(t);
        };
        if let Some(p) = s.path("output_dir")? {
            t.output_dir = p;
        }
        let counts: [(&str, &mut usize); 5] = [
            ("num_train_epochs", &mut t.num_train_epochs),
            ("per_device_train_batch_size", &mut t.per_device_train_batch_size),
            ("gradient_accumulation_steps", &mut t.gradient_accumulation_steps),
            ("save_steps", &mut t.save_steps),
            ("logging_steps", &mut t.logging_steps),
        ];
        for (key, slot) in counts {
            if let Some(v) = s.usize(key)? {
                *slot = v;
            }
        }
        let reals: [(&str, &mut f64); 3] = [
            ("learning_rate", &mut t.learning_rate),
            ("weight_decay", &mut t.weight_decay),
            ("warmup_ratio", &mut t.warmup_ratio),
        ];
        for (key, slot) in reals {
            if let Some(v) = s.float(key)? {
                *slot = v;
            }
        }
        if let Some(v) = s.string("lr_scheduler_type")? {
            t.lr_scheduler_type = match v.as_str() {
                "cosine" => LrSchedulerType::Cosine,
                "constant" => LrSchedulerType::Constant,
                _ => return Err(Error::config("training", "lr_scheduler_type", format!("{v:?} is not cosine or constant"))),
            };
        }
        if let Some(v) = s.uint("seed")? {
            t.seed = v;
        }
        t.resume_from_checkpoint = s.path("resume_from_checkpoint")?;
        self.finish(s);
        Ok(t)
    }

    fn grpo(&mut self, root: &mut Map<String, Value>, inference: &InferenceConfig) -> Result<Option<GrpoSection>> {
        let Some(mut s) = self.section(root, "grpo")? else {
            return Ok(None);
        };
        let d = GrpoConfig::default();
        let config = GrpoConfig {
            group_size: s.usize("group_size")?.unwrap_or(d.group_size),
            clip_eps: s.float("clip_eps")?.unwrap_or(d.clip_eps),
            kl_coeff: s.float("kl_coeff")?.unwrap_or(d.kl_coeff),
            iterations: s.usize("iterations")?.unwrap_or(d.iterations),
            temperature: s.float("temperature")?.or(inference.temperature).unwrap_or(d.temperature),
            max_new_tokens: s.usize("max_new_tokens")?.unwrap_or(inference.max_new_tokens),
        };
        let reward = match s.object("reward")? {
            None => return Err(Error::config("grpo", "reward", "missing required key")),
            Some(m) => {
                let mut r = Section { name: "grpo.reward", map: m };
                let spec = match r.string("type")?.as_deref() {
                    Some("contains") => RewardSpec::Contains {
                        target: r
                            .string("target")?
                            .ok_or_else(|| Error::config("grpo.reward", "target", "missing required key"))?,
                    },
                    Some("model") => RewardSpec::Model,
                    other => {
                        return Err(Error::config(
                            "grpo.reward",
                            "type",
                            format!("expected \"contains\" or \"model\", found {other:?}"),
                        ))
                    }
                };
                self.finish(r);
                spec
            }
        };
        self.finish(s);
        Ok(Some(GrpoSection { config, reward }))
    }

    fn synthesis(&mut self, root: &mut Map<String, Value>) -> Result<Option<SynthesisSection>> {
        let Some(mut s) = self.section(root, "synthesis")? else {
            return Ok(None);
        };
        let d = SynthesisSection::default();
        let out = SynthesisSection {
            prompt_template: s.path("prompt_template")?,
            fan_out: s.usize("fan_out")?.unwrap_or(d.fan_out),
            dedup_threshold: s.float("dedup_threshold")?.unwrap_or(d.dedup_threshold),
            cot_begin: s.string("cot_begin")?.unwrap_or(d.cot_begin),
            cot_end: s.string("cot_end")?.unwrap_or(d.cot_end),
            grounded: s.boolean("grounded")?.unwrap_or(d.grounded),
        };
        self.finish(s);
        Ok(Some(out))
    }
}

/// API inference for the API job and for synthesis jobs pointed at an
/// endpoint without a local teacher.
fn inference_mode(job: JobType, cfg: &InferenceConfig, has_local_teacher: bool) -> InferenceMode {
    match job {
        JobType::BlackBoxKdApi => InferenceMode::Api,
        j if j.synthesis_operator().is_some() && cfg.base_url.is_some() && !has_local_teacher => InferenceMode::Api,
        _ => InferenceMode::Local,
    }
}

fn require<'a, T>(value: &'a Option<T>, section: &str, key: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| Error::config(section, key, "missing required key for this job_type".to_string()))
}

impl JobConfig {
    /// Inference settings with the `ED_API_KEY` override applied.
    pub fn effective_inference(&self) -> InferenceConfig {
        let mut cfg = self.inference.clone();
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                cfg.api_key = Some(Secret::new(key));
            }
        }
        cfg
    }

    /// Required keys per job type and value ranges.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let m = &self.models;
        if self.job_type.trains_student() {
            require(&m.student, "models", "student")?;
            self.training.validate()?;
        }
        match self.job_type {
            JobType::BlackBoxKdApi => {
                require(&d.instruction_path, "dataset", "instruction_path")?;
                require(&d.labeled_path, "dataset", "labeled_path")?;
            }
            JobType::BlackBoxKdLocal => {
                require(&d.instruction_path, "dataset", "instruction_path")?;
                require(&d.labeled_path, "dataset", "labeled_path")?;
                require(&m.teacher, "models", "teacher")?;
            }
            JobType::WhiteBoxKdLocal => {
                require(&d.labeled_path, "dataset", "labeled_path")?;
                require(&d.logits_path, "dataset", "logits_path")?;
                require(&m.teacher, "models", "teacher")?;
            }
            JobType::Dpo | JobType::RewardModel => {
                require(&d.preference_path, "dataset", "preference_path")?;
            }
            JobType::Grpo => {
                require(&d.instruction_path, "dataset", "instruction_path")?;
                let g = require(&self.grpo, "", "grpo")?;
                g.config.validate()?;
                if g.reward == RewardSpec::Model {
                    require(&m.reward, "models", "reward")?;
                }
            }
            JobType::SynthExpand | JobType::SynthRefine => {
                require(&d.instruction_path, "dataset", "instruction_path")?;
            }
            JobType::SynthPairs => {
                require(&d.text_path, "dataset", "text_path")?;
            }
            JobType::CotGenerate => {
                let grounded = self.synthesis.as_ref().is_some_and(|s| s.grounded);
                if grounded {
                    require(&d.labeled_path, "dataset", "labeled_path")?;
                } else if d.instruction_path.is_none() && d.labeled_path.is_none() {
                    return Err(Error::config("dataset", "instruction_path", "missing required key for this job_type"));
                }
            }
            JobType::CotSimplify | JobType::CotExtend => {
                require(&d.cot_path, "dataset", "cot_path")?;
            }
        }
        if self.job_type.synthesis_operator().is_some() {
            require(&d.output_path, "dataset", "output_path")?;
            if m.teacher.is_none() && self.inference.base_url.is_none() {
                return Err(Error::config("models", "teacher", "a local teacher or inference.base_url is required"));
            }
            if let Some(s) = &self.synthesis {
                if s.fan_out == 0 {
                    return Err(Error::config("synthesis", "fan_out", "must be at least 1"));
                }
                if !(0.0..=1.0).contains(&s.dedup_threshold) {
                    return Err(Error::config("synthesis", "dedup_threshold", "must lie in [0, 1]"));
                }
            }
        }
        if let Some(spec) = &self.distillation {
            spec.validate()?;
        }
        if let Some(dpo) = &self.dpo {
            if !(dpo.beta > 0.0 && dpo.beta.is_finite()) {
                return Err(Error::config("dpo", "beta", "must be positive"));
            }
        }
        if let Some(mc) = &m.model_config {
            mc.validate().map_err(|e| Error::config("models", "model_config", e.to_string()))?;
        }
        let inference = self.effective_inference();
        if inference.mode == InferenceMode::Api && inference.api_key.is_none() {
            return Err(Error::config("inference", "api_key", format!("missing (set it or {API_KEY_ENV})")));
        }
        inference.validate()
    }

    /// Strict JSON form; parsing it again yields an equal config.
    pub fn to_value(&self) -> Value {
        fn put<T: Serialize>(m: &mut Map<String, Value>, key: &str, v: &Option<T>) {
            if let Some(v) = v {
                m.insert(key.into(), serde_json::to_value(v).expect("serializable"));
            }
        }
        let d = &self.dataset;
        let mut dataset = Map::new();
        put(&mut dataset, "instruction_path", &d.instruction_path);
        put(&mut dataset, "labeled_path", &d.labeled_path);
        put(&mut dataset, "logits_path", &d.logits_path);
        put(&mut dataset, "template", &d.template);
        put(&mut dataset, "preference_path", &d.preference_path);
        put(&mut dataset, "text_path", &d.text_path);
        put(&mut dataset, "cot_path", &d.cot_path);
        put(&mut dataset, "output_path", &d.output_path);
        dataset.insert("seed".into(), json!(d.seed));

        let i = &self.inference;
        let mut inference = Map::new();
        put(&mut inference, "base_url", &i.base_url);
        put(&mut inference, "api_key", &i.api_key);
        put(&mut inference, "model", &i.model);
        inference.insert("stream".into(), json!(i.stream));
        inference.insert("system_prompt".into(), json!(i.system_prompt));
        inference.insert("max_new_tokens".into(), json!(i.max_new_tokens));
        put(&mut inference, "temperature", &i.temperature);
        inference.insert("seed".into(), json!(i.seed));
        put(&mut inference, "max_model_len", &i.max_model_len);
        inference.insert("concurrency".into(), json!(i.concurrency));
        inference.insert("retry_attempts".into(), json!(i.retry.attempts));
        inference.insert("retry_base_delay_ms".into(), json!(i.retry.base_delay_ms));
        put(&mut inference, "gpu_memory_utilization", &i.backend.gpu_memory_utilization);
        put(&mut inference, "enable_chunked_prefill", &i.backend.enable_chunked_prefill);
        put(&mut inference, "trust_remote_code", &i.backend.trust_remote_code);
        put(&mut inference, "enforce_eager", &i.backend.enforce_eager);

        let m = &self.models;
        let mut models = Map::new();
        put(&mut models, "teacher", &m.teacher);
        put(&mut models, "student", &m.student);
        put(&mut models, "reward", &m.reward);
        put(&mut models, "reference", &m.reference);
        put(&mut models, "model_config", &m.model_config);

        let mut root = Map::new();
        root.insert("job_type".into(), json!(self.job_type.as_str()));
        root.insert("dataset".into(), Value::Object(dataset));
        root.insert("inference".into(), Value::Object(inference));
        if let Some(s) = &self.distillation {
            root.insert("distillation".into(), serde_json::to_value(s).expect("serializable"));
        }
        root.insert("models".into(), Value::Object(models));
        root.insert("training".into(), serde_json::to_value(&self.training).expect("serializable"));
        if let Some(dpo) = &self.dpo {
            root.insert("dpo".into(), json!({"beta": dpo.beta}));
        }
        if let Some(g) = &self.grpo {
            let reward = match &g.reward {
                RewardSpec::Contains { target } => json!({"type": "contains", "target": target}),
                RewardSpec::Model => json!({"type": "model"}),
            };
            let mut v = serde_json::to_value(&g.config).expect("serializable");
            v["reward"] = reward;
            root.insert("grpo".into(), v);
        }
        if let Some(s) = &self.synthesis {
            let mut v = json!({
                "fan_out": s.fan_out,
                "dedup_threshold": s.dedup_threshold,
                "cot_begin": s.cot_begin,
                "cot_end": s.cot_end,
                "grounded": s.grounded,
            });
            if let Some(p) = &s.prompt_template {
                v["prompt_template"] = json!(p);
            }
            root.insert("synthesis".into(), v);
        }
        for (section, keys) in &self.unknown {
            let target = if section.is_empty() {
                &mut root
            } else {
                let parts: Vec<&str> = section.split('.').collect();
                let mut cur = &mut root;
                for p in parts {
                    let entry = cur.entry(p.to_string()).or_insert_with(|| json!({}));
                    cur = entry.as_object_mut().expect("known sections are objects");
                }
                cur
            };
            for (k, v) in keys {
                target.insert(k.clone(), v.clone());
            }
        }
        Value::Object(root)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("serializable")
    }

    /// The config as JSON with the API key masked.
    pub fn redacted(&self) -> Value {
        let mut v = self.to_value();
        if let Some(k) = v.pointer_mut("/inference/api_key") {
            *k = json!("***");
        }
        v
    }
}
