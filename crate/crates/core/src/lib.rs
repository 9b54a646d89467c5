//! Interpretable multimodal machine translation laboratory.

pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod params;
pub mod probe;
pub mod retriever;
pub mod train;

pub use error::{MmtError, Result};
