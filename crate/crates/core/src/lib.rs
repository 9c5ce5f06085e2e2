//! Attention-stabilized multiple instance learning.
//!
//! A small dense-matrix engine with reverse-mode differentiation, the
//! attention maps used by the MIL models (softmax, normalized sigmoid,
//! α-entmax and a learned blend), ABMIL and token-based ASMIL models, an
//! EMA anchor that regularizes the online attention, and the diagnostics used
//! to study attention drift and over-concentration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchor;
pub mod attention;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod theorem;
pub mod trainer;

pub use error::{AsmilError, Result};
pub use model::{Architecture, Bag, ModelConfig, ParamSet};
pub use tensor::DenseMatrix;
pub use trainer::{fit, FitOutput, TrainConfig, Trainer};
