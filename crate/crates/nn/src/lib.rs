//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Matrix products
//! go through `matrixmultiply`, single-threaded, so results are bitwise
//! reproducible on a given machine.

mod conv;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{fan_in_uniform, ParamId, ParamKey, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter {0}")]
    Missing(String),
}
