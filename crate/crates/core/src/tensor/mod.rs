//! Dense values, the differentiation tape and its kernels.

mod graph;
pub mod kernels;
mod value;

pub use graph::{sigmoid, Gradients, Graph, ParamGrad, Precision, Var, MASK_SENTINEL};
pub use kernels::PROB_EPS;
pub use value::DenseValue;
