pub mod cli;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod predict;
pub mod sparse;
pub mod store;
pub mod sweep;
pub mod tron;

pub use error::{Error, Result};
