//! Robust symbol-level precoding with constructive interference.

pub mod barrier;
pub mod channel;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ipm;
pub mod model;
pub mod nn;
pub mod quant;

pub use error::{Result, SlpError};
