//! Reverse-mode automatic differentiation over dense tensors, generic over
//! the floating point type.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use conv::conv2d;
pub use error::{AutodiffError, Result};
pub use graph::{concat_cols, concat_rows, sigmoid, softplus, Gradients, Grads, Graph, SparseMap, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamStore};
pub use scalar::{gemm, lit, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
