//! Differentiable f64 tensor core: values, the reverse-mode tape, fused
//! convolution and sampling ops, SGD, finite-difference checking, and
//! checkpoint serialization.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod sample;
pub mod tape;
pub mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use optim::{Param, ParamSet};
pub use tape::{Tape, TapeOp, VarId};
pub use tensor::Tensor;
