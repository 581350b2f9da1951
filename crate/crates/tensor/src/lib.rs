//! Dense tensors and a reverse-mode differentiation tape, generic over the
//! floating point element type.
//!
//! Training runs in `f32`; gradient checks and reference computations use
//! `f64`. The aliases at the crate root name the two concrete instantiations.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Activation, BinaryOp, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
