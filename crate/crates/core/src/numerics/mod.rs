//! Dense tensors, the differentiation tape, parameters and the optimizer.

mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod sparse;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_sampled, GradCheckReport};
pub use graph::{sigmoid, softplus, CustomOp, Gradients, Graph, Unary, Var};
pub use params::{AdamConfig, ParamStore};
pub use sparse::{SparseMap, SparseMapBuilder};
pub use tensor::Tensor;
