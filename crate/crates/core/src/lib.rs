//! Masked edge prediction: a small encoder–decoder edge detector trained on
//! partially revealed edge maps, decoded by confidence-ordered unmasking and
//! scored with a crispness-aware benchmark.

pub mod error;
pub mod eval;
pub mod imgproc;
pub mod inference;
pub mod io;
pub mod maps;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use maps::{BinaryMap, EdgeState, ProbabilityMap, TriStateEdgeMap};
pub use model::{GranularityScale, LoraSpec, LoraTargets, MemoNetwork, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;

/// Production tensors.
pub type TensorF32 = tensor::Tensor<f32>;
/// Gradient-check tensors.
pub type TensorF64 = tensor::Tensor<f64>;
pub type Network = model::MemoNetwork<f32>;
pub type Network64 = model::MemoNetwork<f64>;
