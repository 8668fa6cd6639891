pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod ssl;
pub mod variants;

pub use error::{Error, Result};
