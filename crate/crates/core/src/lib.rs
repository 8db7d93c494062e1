pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod seed;
pub mod style;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
