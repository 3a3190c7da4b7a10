pub mod attacks;
pub mod checkpoint;
pub mod compression;
pub mod data;
pub mod error;
pub mod matrix;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
