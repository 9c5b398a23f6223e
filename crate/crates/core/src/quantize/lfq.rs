use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::QuantError;
use crate::rng;

/// Lookup-free quantizer: the code is the sign pattern of a fixed projection
/// of the input, giving an implicit vocabulary of `2^bits` ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfqCodec {
    dim: usize,
    bits: usize,
    /// `dim × bits`, row-major, orthonormal columns.
    projection: Vec<f64>,
}

impl LfqCodec {
    pub const MAX_BITS: usize = 31;

    /// Projection columns are seeded Gaussian draws orthonormalized with
    /// modified Gram-Schmidt.
    pub fn new(dim: usize, bits: usize, seed: u64) -> Result<Self, QuantError> {
        if bits == 0 || bits > Self::MAX_BITS || bits > dim {
            return Err(QuantError::InvalidInput("LFQ needs 1 <= bits <= min(dim, 31)"));
        }
        let mut r = rng::seeded(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(bits);
        while cols.len() < bits {
            let mut v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(c) {
                    *a -= dot * b;
                }
            }
            let norm = libm::sqrt(v.iter().map(|a| a * a).sum::<f64>());
            if norm < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
        let mut projection = vec![0.0; dim * bits];
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                projection[i * bits + j] = v;
            }
        }
        Ok(Self { dim, bits, projection })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn vocab_size(&self) -> u32 {
        1u32 << self.bits
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// `f = xᵀ P`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>, QuantError> {
        if x.len() != self.dim {
            return Err(QuantError::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mut f = vec![0.0; self.bits];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.projection[i * self.bits..(i + 1) * self.bits];
            for (fj, p) in f.iter_mut().zip(row) {
                *fj += xi * p;
            }
        }
        Ok(f)
    }

    /// Bit `i` is set when `f_i > 0`; an exact zero maps to 0.
    pub fn encode(&self, x: &[f64]) -> Result<u32, QuantError> {
        Ok(Self::code_of(&self.project(x)?))
    }

    pub fn code_of(features: &[f64]) -> u32 {
        features
            .iter()
            .enumerate()
            .fold(0u32, |id, (i, &f)| if f > 0.0 { id | (1 << i) } else { id })
    }

    /// `±1` per bit.
    pub fn decode(&self, id: u32) -> Result<Vec<f64>, QuantError> {
        if id >= self.vocab_size() {
            return Err(QuantError::CodeOutOfRange {
                level: 0,
                id,
                k: self.vocab_size() as usize,
            });
        }
        Ok((0..self.bits).map(|i| if id >> i & 1 == 1 { 1.0 } else { -1.0 }).collect())
    }

    /// An input whose projection is exactly `signs` (`P s`, valid because the
    /// columns are orthonormal).
    pub fn preimage(&self, signs: &[f64]) -> Vec<f64> {
        self.projection
            .chunks_exact(self.bits)
            .map(|row| row.iter().zip(signs).map(|(p, s)| p * s).sum())
            .collect()
    }
}
