//! Error type shared across the crate.

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Fewer distinct locations than an operation needs.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// A rescaling record collapsed: max - min of the warped knots fell
    /// below the degeneracy floor. The index identifies the warp layer.
    #[error("degenerate warp at layer {layer}: knot image range {range:e} below floor")]
    DegenerateWarp { layer: usize, range: f64 },

    /// A parameter left its admissible region (e.g. a Möbius pole inside
    /// the input square).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A covariance or information matrix failed to factorize even after
    /// jitter.
    #[error("ill-conditioned matrix: {0}")]
    IllConditioned(String),

    /// Minibatches must partition the data into equal-sized blocks.
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),
}

pub type Result<T> = core::result::Result<T, Error>;
