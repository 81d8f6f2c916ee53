//! Knowledge-distillation engine: black-box and white-box KD, preference
//! optimization, reward modelling, GRPO and teacher-driven data synthesis,
//! all running on a compact built-in transformer.

pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod records;
pub mod synthesis;
pub mod teacher;
pub mod trainers;

pub use error::{Error, Result};
