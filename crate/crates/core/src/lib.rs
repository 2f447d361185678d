//! Desk-scale unified vision-language stack on a synthetic shape corpus:
//! dual-branch visual encoding with gated adapters, a dual vector-quantized
//! tokenizer, a small decoder-only language core with grammar-constrained
//! decoding, a query-based segmentation predictor, a mask-guided diffusion
//! decoder, a staged freeze/learning-rate training orchestrator, and the
//! evaluation metrics that go with them.
//!
//! Numeric code is generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below fix the two concrete instantiations used throughout:
//! f32 for training and inference, f64 for finite-difference checks.

pub mod gradcheck;
pub mod config;
pub mod diffuser;
pub mod dualtok;
pub mod encoders;
pub mod evals;
pub mod grid;
pub mod lvlm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod segmenter;
pub mod shapesworld;
pub mod stages;
pub mod system;
pub mod tensor;

pub use scalar::Scalar;

/// Training-precision tape.
pub type Tape32 = tensor::Tape<f32>;
/// Check-precision tape.
pub type Tape64 = tensor::Tape<f64>;
/// Training-precision parameter store.
pub type Params32 = params::ParamStore<f32>;
/// Check-precision parameter store.
pub type Params64 = params::ParamStore<f64>;
