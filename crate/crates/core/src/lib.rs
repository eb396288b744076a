//! Vision-language model tuning: a ViT image encoder, a joint text-image
//! encoder and a text decoder, with per-component freezing, parameter-efficient
//! adapters, instruction-format data generation, training and evaluation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod peft;
pub mod tensor;
pub mod train;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{Component, MileModel, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tuning::{Mode, TuningPlan};
