//! Channel-size search for convolutional architectures.

pub mod container;
pub mod dependency;
pub mod distill;
pub mod error;
pub mod graph;
pub mod init;
pub mod linalg;
pub mod metric;
pub mod plan;
pub mod search;
pub mod tensor;
pub mod visualize;
pub mod trainer;

pub use error::{Error, Result};
