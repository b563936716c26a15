//! Minimal reverse-mode differentiable computation: tensors, a recording
//! tape, layers, optimizers, finite-difference checks and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, value_and_grad};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamGrads, ParamId, Parameters};
pub use tape::{Bound, Gradients, Tape, Var};
pub use tensor::{argmax, log_sum_exp, softmax, softmax_cross_entropy, Tensor};
