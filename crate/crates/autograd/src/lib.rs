//! Tape-based reverse-mode automatic differentiation over dense `[N, C, H, W]`
//! style tensors, generic over the float type.
//!
//! Training code runs on `f32`; gradient checks against finite differences
//! run the same code on `f64`.

mod conv;
pub mod nn;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{Binding, Bound, ParamId, ParamStore};
pub use scalar::{gemm, Scalar, Strides};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
