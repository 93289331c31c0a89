//! Selective prompt tuning at desk scale.
//!
//! A frozen toy transformer encoder gets instance-aware prompts from small
//! PHM-factorized generators attached to every layer. Sigmoid gates decide
//! how strongly each layer's fresh prompt replaces the one propagated from
//! below; the gates are searched with alternating first-order bi-level
//! optimization (plus gate re-parameterization and masked consistency
//! regularization), then the top-K layers are kept and retrained.

pub mod archive;
pub mod autodiff;
pub mod backbone;
pub mod bilevel;
pub mod error;
pub mod harness;
pub mod hypernet;
pub mod optim;
pub mod prompt_gen;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
