//! Dense tensors, reverse-mode differentiation and parameter updates.

pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, Parameter};
pub use tape::{softmax_row, Tape, Var, LAYER_NORM_EPS, MIN_NORM};
pub use tensor::{dot, norm, Tensor};

pub(crate) use tape::matmul_raw;
