//! File formats, dataset IO, evaluation metrics, deterministic parallel
//! training and the command-line driver around `mmtok-core`.

pub mod cli;
pub mod codecs;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod formats;
pub mod trainer;
