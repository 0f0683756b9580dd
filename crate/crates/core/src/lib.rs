//! Masked generative feature distillation at desk scale.
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff and the CNN
//!   primitives (convolution, batch norm, pooling, losses).
//! * [`models`]: ResNet-style and plain CNN backbones exposing named stage
//!   features, plus the `MGDC` checkpoint format.
//! * [`distill`]: mask sampling, the adaptation + generative block, the
//!   masked generative and direct-mimic feature losses.
//! * [`trainer`]: baseline and distillation training loops, evaluation and
//!   feature-difference tracking.
//! * [`data`]: IDX / CIFAR-10 binary loaders, a seeded synthetic dataset,
//!   deterministic batching.

pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use optim::{sgd_step, Parameter, SgdConfig};
pub use tensor::{no_grad, Scalar, Tensor};
