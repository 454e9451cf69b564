pub mod attention;
pub mod data;
pub mod error;
pub mod generation;
pub mod model;
pub mod pipeline;
pub mod rouge;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
