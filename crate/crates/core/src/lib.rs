pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tasks;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
