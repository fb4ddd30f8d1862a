//! Dense tensors with a reverse-mode tape, sized for training small
//! attention probes on CPU.
//!
//! Forward ops are methods on [`Tape`]; each returns a [`Var`] handle.
//! `Tape::backward` accumulates gradients into a [`ParamStore`], and
//! [`Adam`] consumes them. Everything is generic over [`Scalar`] so the same
//! model code runs in `f32` for training and `f64` for [`grad_check`].

mod error;
mod gradcheck;
pub mod kernels;
mod optim;
mod param;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use kernels::UpsampleMode;
pub use optim::Adam;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, Scalar, Tensor};
