//! Adaptive domain scaling ranker: hypernetwork-personalized sequence and
//! candidate representations feeding position-wise target attention, built
//! on a small reverse-mode differentiation core.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pcrg;
pub mod psrg;
pub mod ranker;
pub mod tensor;
pub mod train;

pub use error::{AdsError, Result};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tensor::{DenseValue, Gradients, Graph, ParamGrad, Precision, Var};
