//! Video transformer with hierarchical temporal attention and aggregated
//! spatial attention for online surgical phase recognition.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod asa;
pub mod eval;
pub mod hta;
pub mod model;
pub mod params;
pub mod tokenizer;
pub mod trainer;
