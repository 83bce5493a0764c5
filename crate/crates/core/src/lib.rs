pub mod cli;
pub mod cluster;
pub mod dataset;
pub mod distance;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod signal;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
