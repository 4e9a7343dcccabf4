//! Small CPU tensor library with tape-based reverse-mode differentiation.
//!
//! Everything is single-threaded and deterministic: the same inputs produce
//! bit-identical outputs. Convolutions lower to GEMM through `matrixmultiply`.

pub mod kernels;
pub mod optim;
pub mod params;
mod scalar;
pub mod tape;
mod tensor;

pub use kernels::conv::Conv2dCfg;
pub use kernels::norm::BatchStats;
pub use kernels::pool::PoolCfg;
pub use optim::{clip_grad_norm, cosine_lr, Adam, Optimizer, Sgd};
pub use params::{Binding, Param, ParamId, ParamKind, ParamStore};
pub use scalar::{matmul, Layout, Scalar};
pub use tape::{softmax_slice, soft_target_ce_value, Activation, Grads, Tape, Var};
pub use tensor::{ShapeError, Tensor};
