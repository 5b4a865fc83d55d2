//! Dense tensor kernels with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GRAD_FLOOR};
pub use tape::{BatchStats, Gradients, NormMode, Tape, Var};
pub use tensor::{attention, conv1d, erf, gelu, gemm, layer_norm, Tensor};
