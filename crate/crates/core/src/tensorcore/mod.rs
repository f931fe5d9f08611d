//! Deterministic reverse-mode differentiation over `f64` arrays, with the
//! handful of primitives the encoder and heads need and two optimizers.

mod array;
pub(crate) mod gemm;
pub mod ops;
mod optim;
mod param;
mod tape;

pub use array::ArrayF;
pub use ops::{
    conv1d, dense, dropout, global_max_pool, relu, softmax_cross_entropy, softmax_rows, Function,
};
pub use optim::{
    adadelta_step, cosine_lr, optimizer_step, sgd_cosine_step, OptimizerKind, OptimizerState,
};
pub use param::{glorot_uniform, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
