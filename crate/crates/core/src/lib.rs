//! Training and inference engine for a SqueezeNet image classifier aimed at
//! static fingerspelling (ASL alphabet) recognition.
//!
//! - [`tensor`]: dense `f32` tensors, matrix product, He initialization
//! - [`ops`]: layer primitives with forward and backward passes
//! - [`model`]: fire modules and the full classifier
//! - [`train`]: cross-entropy, SGD with momentum, epoch loop, metrics
//! - [`data`]: image decoding, preprocessing, augmentation, datasets
//! - [`checkpoint`]: the `FSQ1` binary checkpoint format

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{FireSpec, Model, ModelConfig};
pub use tensor::{Shape, Tensor};
