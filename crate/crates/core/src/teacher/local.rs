use std::path::Path;

use super::{annotate_with, Annotation, InferenceConfig, TeacherClient, TeacherRequest};
use crate::error::Result;
use crate::model::{load_model, tokenizer, ChatTemplate, GenerationOptions, TinyLM};
use crate::records::InstructionRecord;

/// A built-in model answering prompts through a chat template.
pub struct LocalTeacher {
    model: TinyLM,
    template: ChatTemplate,
    temperature: f64,
    max_new_tokens: usize,
    seed: u64,
    config_hash: String,
}

impl LocalTeacher {
    pub fn new(model: TinyLM, template: ChatTemplate, cfg: &InferenceConfig) -> Self {
        Self {
            model,
            template,
            temperature: cfg.temperature.unwrap_or(0.0),
            max_new_tokens: cfg.max_new_tokens,
            seed: cfg.seed,
            config_hash: cfg.content_hash(),
        }
    }

    pub fn model(&self) -> &TinyLM {
        &self.model
    }

    /// Per-request seed: mixes the configured seed with the request id so
    /// results do not depend on which worker served the request.
    fn request_seed(&self, id: u64) -> u64 {
        let mut z = self.seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

impl TeacherClient for LocalTeacher {
    fn complete(&self, request: &TeacherRequest<'_>) -> Result<String> {
        let prompt = self.template.encode_prompt(request.system, request.user);
        let window = self.model.config().max_seq_len;
        let prompt = if prompt.len() >= window {
            prompt[prompt.len() - (window - 1)..].to_vec()
        } else {
            prompt
        };
        let opts = GenerationOptions {
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            seed: self.request_seed(request.id),
        };
        let generation = self.model.generate(&prompt, &opts)?;
        Ok(tokenizer::detokenize(generation.content()))
    }

    fn config_hash(&self) -> String {
        self.config_hash.clone()
    }
}

/// Label instructions with a local teacher checkpoint. The checkpoint is
/// only loaded when there is work to do.
pub fn annotate_local(
    instructions: &[InstructionRecord],
    teacher_dir: &Path,
    template: &ChatTemplate,
    cfg: &InferenceConfig,
) -> Result<Vec<Annotation>> {
    if instructions.is_empty() {
        return Ok(Vec::new());
    }
    let teacher = LocalTeacher::new(load_model(teacher_dir)?, template.clone(), cfg);
    annotate_with(instructions, &teacher, &cfg.system_prompt, rayon::current_num_threads())
}
