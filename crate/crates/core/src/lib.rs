//! A membership-inference workbench around a small byte-level language
//! model: training, seven reference attacks, a soft-prompt attack in
//! aligned and unaligned form, two fine-tuning defenses, and ROC/AUC
//! evaluation.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod align;
pub mod artifact;
pub mod baselines;
pub mod datasets;
pub mod defenses;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod sweep;
pub mod tape;
pub mod template;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod tuner;
pub mod vocab;

pub use error::{Error, Result};
pub use pipeline::RunConfig;
pub use scalar::Scalar;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type TapeF32 = tape::Tape<f32>;
pub type TapeF64 = tape::Tape<f64>;
pub type ModelF32 = model::TransformerLM<f32>;
pub type ModelF64 = model::TransformerLM<f64>;
pub type SoftPromptF32 = model::SoftPrompt<f32>;
pub type SoftPromptF64 = model::SoftPrompt<f64>;
