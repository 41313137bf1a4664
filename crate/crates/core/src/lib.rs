//! Deep residual networks on a small, self-contained numeric stack.
//!
//! Layers, from the bottom up:
//!
//! - [`tensor`]: dense row-major arrays, im2col lowering, GEMM.
//! - [`autodiff`]: a define-by-run tape with reverse-mode gradients and a
//!   central-difference checker.
//! - [`nn`]: convolution, batch norm, ReLU, pooling, linear, softmax
//!   cross-entropy, He initialization.
//! - [`blocks`]: basic and bottleneck residual blocks with identity,
//!   zero-padding and projection shortcuts.
//! - [`arch`]: CIFAR 6n+2 and ImageNet network descriptions, parameter and
//!   multiply-add audits.
//! - [`model`]: executable networks built from those descriptions.
//! - [`optim`]: SGD with momentum, weight decay, milestone schedule, warmup.
//! - [`data`]: CIFAR-10 binary loading, augmentation, synthetic datasets.
//! - [`harness`]: training, evaluation, checkpoints, layer-response
//!   statistics and the plain-vs-residual depth study.

pub mod arch;
pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
