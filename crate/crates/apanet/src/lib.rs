pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiments;
pub mod plots;
pub mod report;

pub use error::{Error, Result};
