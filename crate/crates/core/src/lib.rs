//! End-to-end toolkit for studying the robustness of small galaxy-morphology
//! CNN classifiers: synthetic survey imaging, G-M20 labeling, training with
//! and without MMD domain adaptation, one-pixel differential-evolution
//! attacks, and latent-space analysis (distances, church-window plots,
//! isomaps).

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod models;
pub mod morphology;
pub mod digest;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f32 tensors are used for training and inference.
pub type Tensor32 = tensor::Tensor<f32>;
/// f64 tensors back the gradient checks and analysis math.
pub type Tensor64 = tensor::Tensor<f64>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
