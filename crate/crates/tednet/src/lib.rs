//! TEDnet: a trellis encoder-decoder network for crowd density estimation,
//! implemented from scratch on the CPU.
//!
//! The crate is organized around a dense 4-D tensor type and hand-written
//! forward/backward kernels ([`tensor`]), the trellis model itself
//! ([`model`]), the combinatorial SAL+SCL loss with distributed supervision
//! ([`losses`]), ground-truth density map rendering ([`groundtruth`]),
//! counting and map-quality metrics ([`metrics`]), and an Adam-based
//! training loop with a synthetic scene generator ([`training`]).

pub mod gradcheck;
pub mod groundtruth;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/layer shape violation, with a diagnostic of the offending dims.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid configuration (flags, config file, architecture constraints).
    #[error("config error: {0}")]
    Config(String),
    /// Bad or missing input data (datasets, annotations, checkpoints).
    #[error("data error: {0}")]
    Data(String),
    /// Numerical failure (NaN loss, failed gradient check).
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
