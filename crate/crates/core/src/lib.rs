//! Desk-scale decoder-only language-model lifecycle.
//!
//! Modules build on each other bottom-up: [`tensor`] provides the autodiff
//! substrate, [`model`] the decoder, [`optim`] the training update rules,
//! [`data`] toy corpora and filtering, [`compress`] pruning, distillation,
//! adapters and palettization, and [`align`] supervised fine-tuning, reward
//! modeling and online RL.

// NaN-aware checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod error;
pub mod checkpoint;
pub mod compress;
pub mod data;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, Record};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ParamStore};
pub use rng::SeedTree;
pub use tensor::{DType, Scalar, Tape, Tensor, TensorError, Var};
