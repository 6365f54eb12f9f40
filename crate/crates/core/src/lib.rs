pub mod baseline;
pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod genunits;
pub mod nn;
pub mod pipeline;
pub mod prng;
pub mod susceptibility;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::Tensor;
