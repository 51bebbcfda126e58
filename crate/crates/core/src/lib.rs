//! Free adversarial training on a small, dependency-light autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`ops`], [`tape`], [`gradcheck`]: dense `f32` tensors,
//!   primitives with reverse-mode rules, and a tape whose single backward pass
//!   yields gradients for parameters and inputs together.
//! - [`models`], [`checkpoint`]: MLP and small convnet classifiers, He init,
//!   SGD with momentum and weight decay, and the `FTCK` checkpoint format.
//! - [`attacks`]: FGSM, BIM/PGD-K and restarted PGD under cross-entropy or
//!   margin loss.
//! - [`training`]: natural, K-PGD and free (minibatch replay) training.
//! - [`data`]: IDX and CIFAR-10 loaders, synthetic blobs, batching.
//! - [`harness`]: robustness evaluation, loss surfaces, ledger checks, config
//!   files and the end-to-end experiment runner behind the CLI.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod ledger;
pub mod models;
pub mod ops;
pub mod perturb;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use ledger::CostLedger;
pub use tensor::Tensor;
