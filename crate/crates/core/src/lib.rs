pub mod atomic;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
