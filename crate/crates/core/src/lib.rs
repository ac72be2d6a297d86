//! Post-deployment adaptation of a GRU speech enhancer across acoustic
//! scenes with self-supervised remixing and low-rank adapters.

pub mod adapt;
pub mod autodiff;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod seed;
pub mod signal;

pub use error::{Error, Result};
