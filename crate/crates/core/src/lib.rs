//! Two-branch prototype alignment for few-shot semantic segmentation.
//!
//! The support-query branch compares a support foreground prototype with
//! every query feature. During training a second, query-query branch pools
//! prototypes from clustered regions of the query background and learns to
//! match each region with its own prototype while rejecting the foreground.
//! Both branches share one comparison head; only the first runs at
//! inference.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the
//! experiment driver, and the CLI live in the `apanet` crate.

#![no_std]

extern crate alloc;

pub mod alignment;
pub mod backbone;
pub mod data;
mod error;
pub mod head;
pub mod metrics;
pub mod nn;
pub mod prototypes;
pub mod tensor;

pub use error::{Error, Result};
pub use nn::Params;
pub use tensor::{Mask, Tensor3};

pub use rand_chacha::ChaCha8Rng;
