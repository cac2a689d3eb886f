//! Reverse-mode autodiff and the IPNet bias-prior network. All arithmetic is f64.

pub mod autodiff;
pub mod error;
pub mod ipnet;

pub use error::{NnError, Result};
pub use ipnet::{IpnetConfig, ModelWeights, TrainingSchedule};
