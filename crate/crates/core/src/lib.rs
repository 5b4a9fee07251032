pub mod classifier;
pub mod domain;
pub mod error;
pub mod evalkit;
pub mod extractor;
pub mod lifecycle;
pub mod memory;
pub mod runner;
pub mod simstream;

pub use error::{Error, Result};
