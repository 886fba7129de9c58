//! Dense tensors, numeric kernels and a reverse-mode autodiff tape.

mod params;
mod scalar;
mod tape;
mod tensor;

pub use params::{ParamGrads, ParamId, ParamStore};
pub use scalar::Real;
pub use tape::{GradFault, Gradients, PoolKind, Tape, Var};
pub use tensor::{layer_norm, masked_softmax, matmul, matmul_ex, Tensor, NEG_INF};
