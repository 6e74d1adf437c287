//! Layer-wise mixture-of-experts steering between a frozen toy encoder and a
//! frozen toy autoregressive decoder.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod numerics;
pub mod parallel;
pub mod steering;
pub mod training;

pub use error::{Error, Result};
