//! Dense `f64` tensors with tape-based reverse-mode differentiation over a
//! fixed primitive set, plus named parameter containers and optimizers.

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Gradients, ParamEntry, ParamId, ParamKey, ParamSet, FORMAT_VERSION};
pub use tape::{log_sum_exp, matmul_into, Primitive, Tape, Var};
pub use tensor::Tensor;
