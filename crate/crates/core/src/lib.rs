//! Blind image quality assessment with a transformer encoder, a CLS-driven
//! quality-aware decoder, and an attention panel of query embeddings.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quality_decoder;
pub mod tensor;
pub mod training;
pub mod vit_encoder;

pub use error::{CheckpointError, Error, Result};
pub use model::{DeiqtModel, ForwardPass, Prediction};
pub use quality_decoder::Variant;
pub use tensor::{Precision, Real, Rng, Tape, Tensor, Var};
pub use vit_encoder::ModelConfig;
