//! Propensity score weighting for binary and multi-arm treatments.

pub mod balance;
pub mod data;
pub mod error;
pub mod estimate;
pub mod formula;
pub mod glm;
pub mod inference;
pub mod pipeline;
pub mod simulate;
pub mod stats;
pub mod trim;
pub mod weights;

pub use data::Dataset;
pub use error::{Error, ErrorKind, Result};
