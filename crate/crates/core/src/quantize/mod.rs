//! Quantization cores: k-means codebooks, residual vector quantization and
//! sign-bit lookup-free quantization.

mod kmeans;
mod lfq;
mod rvq;

pub use kmeans::{train_codebook, train_codebook_pinned, Codebook};
pub use lfq::LfqCodec;
pub use rvq::{train_rvq, RvqCodec};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuantError {
    #[error("need at least {k} vectors to train {k} codes, got {n}")]
    TooFewVectors { n: usize, k: usize },
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("code {id} out of range for level {level} with {k} codes")]
    CodeOutOfRange { level: usize, id: u32, k: usize },
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
