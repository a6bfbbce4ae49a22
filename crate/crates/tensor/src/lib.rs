//! Dense tensors on a reverse-mode differentiation tape.
//!
//! [`Tape`] records eager ops on [`Var`] handles; [`ParamSet`] holds the named
//! learnable tensors a model binds onto a tape, and [`optim`] updates them.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{clip_grad_norm, sgd_momentum_step, LrSchedule, OptimizerState};
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{broadcast_shape, Bags, Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
