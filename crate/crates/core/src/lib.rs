pub mod cli;
pub mod cohort;
pub mod error;
pub mod explain;
pub mod features;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
