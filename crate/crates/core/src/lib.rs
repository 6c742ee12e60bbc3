pub mod attention;
pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
