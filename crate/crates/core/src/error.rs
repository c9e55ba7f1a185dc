use std::io;

use thiserror::Error;

/// Errors raised across the precoding toolkit.
#[derive(Debug, Error)]
pub enum SlpError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("symbol {index} is not unit-modulus (|d| = {modulus})")]
    Modulation { index: usize, modulus: f64 },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("point outside the barrier domain: {0}")]
    Domain(String),

    #[error("infeasible problem: max violated margin {max_margin:e}")]
    Infeasible { max_margin: f64 },

    #[error("state error: {0}")]
    State(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SlpError>;
