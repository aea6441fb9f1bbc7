pub mod conversion;
pub mod data;
pub mod error;
pub mod nets;
pub mod seed;
pub mod similarity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
