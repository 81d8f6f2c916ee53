//! The built-in decoder-only transformer, its byte tokenizer, chat
//! templates and checkpoint format.

pub mod checkpoint;
mod config;
pub mod template;
mod tinylm;
pub mod tokenizer;

pub use checkpoint::{load_model, load_model_config, save_model};
pub use config::ModelConfig;
pub use template::{ChatTemplate, EncodedSample, Rendered};
pub use tinylm::{ForwardOutput, Generation, GenerationOptions, Param, TinyLM};

