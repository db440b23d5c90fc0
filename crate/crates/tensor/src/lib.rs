//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Ops are methods on
//! [`Graph`]; a graph borrows a [`ParamStore`] for the duration of one
//! forward/backward pass.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_input, check_params, relative_error, GradCheckOptions, GradCheckReport, TensorCheck};
pub use graph::{Gradients, Graph, GraphStats, Var};
pub use init::{Init, InitKind};
pub use ops::{attention_probabilities, RunningStats};
pub use optim::Sgd;
pub use params::{BufferId, ParamId, ParamStore, Slot};
pub use scalar::{cast, DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
