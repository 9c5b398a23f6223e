use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{sq_dist, train_codebook, train_codebook_pinned, Codebook, QuantError};

/// Residual vector quantizer: level 0 quantizes the input, each later level
/// quantizes what the previous levels left over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqCodec {
    levels: Vec<Codebook>,
}

/// Trains the levels coarse to fine, each on the residuals of the previous
/// ones. Residual levels keep codeword 0 at the origin.
pub fn train_rvq(
    vectors: &[f64],
    dim: usize,
    codes_per_level: &[usize],
    iters: usize,
    seed: u64,
) -> Result<RvqCodec, QuantError> {
    if codes_per_level.is_empty() {
        return Err(QuantError::InvalidInput("an RVQ needs at least one level"));
    }
    let mut residual = vectors.to_vec();
    let mut levels = Vec::with_capacity(codes_per_level.len());
    for (l, &k) in codes_per_level.iter().enumerate() {
        let cb = if l == 0 {
            train_codebook(&residual, dim, k, iters, seed)?
        } else {
            train_codebook_pinned(&residual, dim, k, iters)?
        };
        for r in residual.chunks_exact_mut(dim) {
            let (i, _) = cb.nearest(r);
            for (v, c) in r.iter_mut().zip(cb.entry(i)) {
                *v -= c;
            }
        }
        levels.push(cb);
    }
    RvqCodec::new(levels)
}

impl RvqCodec {
    pub fn new(levels: Vec<Codebook>) -> Result<Self, QuantError> {
        let Some(first) = levels.first() else {
            return Err(QuantError::InvalidInput("an RVQ needs at least one level"));
        };
        let dim = first.dim();
        if let Some(bad) = levels.iter().find(|c| c.dim() != dim) {
            return Err(QuantError::DimMismatch {
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self { levels })
    }

    pub fn dim(&self) -> usize {
        self.levels[0].dim()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Codebook] {
        &self.levels
    }

    /// Keeps only the first `n` levels.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            levels: self.levels[..n.clamp(1, self.levels.len())].to_vec(),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<u32>, QuantError> {
        self.encode_with_residuals(x).map(|(ids, _)| ids)
    }

    /// Codes plus `‖r_l‖²`, the energy left after each level.
    pub fn encode_with_residuals(&self, x: &[f64]) -> Result<(Vec<u32>, Vec<f64>), QuantError> {
        if x.len() != self.dim() {
            return Err(QuantError::DimMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(QuantError::InvalidInput("non-finite vector"));
        }
        let mut residual = x.to_vec();
        let mut ids = Vec::with_capacity(self.levels.len());
        let mut energy = Vec::with_capacity(self.levels.len());
        for cb in &self.levels {
            let (i, _) = cb.nearest(&residual);
            for (v, c) in residual.iter_mut().zip(cb.entry(i)) {
                *v -= c;
            }
            ids.push(i as u32);
            energy.push(residual.iter().map(|v| v * v).sum());
        }
        Ok((ids, energy))
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<f64>, QuantError> {
        if ids.len() != self.levels.len() {
            return Err(QuantError::DimMismatch {
                expected: self.levels.len(),
                got: ids.len(),
            });
        }
        let mut out = vec![0.0; self.dim()];
        for (level, (cb, &id)) in self.levels.iter().zip(ids).enumerate() {
            if id as usize >= cb.k() {
                return Err(QuantError::CodeOutOfRange { level, id, k: cb.k() });
            }
            for (o, c) in out.iter_mut().zip(cb.entry(id as usize)) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// Mean squared reconstruction error after each level over `vectors`.
    pub fn level_distortion(&self, vectors: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let n = vectors.len() / dim;
        let mut acc = vec![0.0; self.levels.len()];
        for v in vectors.chunks_exact(dim) {
            if let Ok((_, e)) = self.encode_with_residuals(v) {
                for (a, e) in acc.iter_mut().zip(e) {
                    *a += e;
                }
            }
        }
        acc.iter().map(|a| a / n.max(1) as f64).collect()
    }

    pub fn reconstruction_error(&self, x: &[f64]) -> Result<f64, QuantError> {
        let ids = self.encode(x)?;
        Ok(sq_dist(x, &self.decode(&ids)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn blobs(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        let centres: Vec<f64> = (0..6 * dim).map(|_| 3.0 * rng::normal(&mut r)).collect();
        let mut out = Vec::with_capacity(n * dim);
        for i in 0..n {
            let c = &centres[(i % 6) * dim..(i % 6 + 1) * dim];
            out.extend(c.iter().map(|m| m + 0.7 * rng::normal(&mut r)));
        }
        out
    }

    #[test]
    fn codeword_is_a_fixed_point() {
        let cb = Codebook::from_entries(2, alloc::vec![0.0, 0.0, 1.5, -2.0, 4.0, 4.0]).unwrap();
        let codec = RvqCodec::new(alloc::vec![cb]).unwrap();
        let (ids, e) = codec.encode_with_residuals(&[1.5, -2.0]).unwrap();
        assert_eq!(ids, [1]);
        assert_eq!(e, [0.0]);
        assert_eq!(codec.decode(&[1]).unwrap(), [1.5, -2.0]);
    }

    #[test]
    fn residual_energy_non_increasing() {
        let dim = 4;
        let data = blobs(800, dim, 1);
        let codec = train_rvq(&data, dim, &[8, 8, 8, 8], 25, 7).unwrap();
        let mut r = rng::seeded(99);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..dim).map(|_| 4.0 * rng::normal(&mut r)).collect();
            let (ids, energy) = codec.encode_with_residuals(&x).unwrap();
            // oracle: redo the per-level argmin by brute force
            let mut res = x.clone();
            for (l, cb) in codec.levels().iter().enumerate() {
                let mut best = (0usize, f64::INFINITY);
                for j in 0..cb.k() {
                    let d = sq_dist(&res, cb.entry(j));
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                assert_eq!(ids[l] as usize, best.0);
                for (v, c) in res.iter_mut().zip(cb.entry(best.0)) {
                    *v -= c;
                }
            }
            for w in energy.windows(2) {
                assert!(w[1] <= w[0], "{energy:?}");
            }
        }
    }

    #[test]
    fn more_levels_never_worse_than_one() {
        let dim = 3;
        let data = blobs(600, dim, 2);
        let codec = train_rvq(&data, dim, &[6, 6, 6, 6], 25, 1).unwrap();
        let one = codec.truncated(1);
        for x in data.chunks(dim) {
            assert!(codec.reconstruction_error(x).unwrap() <= one.reconstruction_error(x).unwrap());
        }
        let d = codec.level_distortion(&data);
        for w in d.windows(2) {
            assert!(w[1] < w[0], "{d:?}");
        }
    }

    /// Single-level re-encoding is exact. With residual levels the greedy
    /// search can pick a different level-0 codeword for the decoded point, so
    /// only a high stability rate is expected.
    #[test]
    fn reencoding_is_stable_on_training_data() {
        let dim = 3;
        let data = blobs(1000, dim, 3);
        let codec = train_rvq(&data, dim, &[8, 4, 4], 30, 4).unwrap();
        let rate = |c: &RvqCodec| {
            let mut stable = 0;
            for x in data.chunks(dim) {
                let ids = c.encode(x).unwrap();
                let again = c.encode(&c.decode(&ids).unwrap()).unwrap();
                stable += usize::from(ids == again);
            }
            stable
        };
        assert_eq!(rate(&codec.truncated(1)), 1000);
        assert!(rate(&codec) >= 900);
    }

    #[test]
    fn decode_definition_and_errors() {
        let data = blobs(200, 2, 4);
        let codec = train_rvq(&data, 2, &[4, 4], 10, 0).unwrap();
        let zero = codec.decode(&[0, 0]).unwrap();
        let want: Vec<f64> = (0..2).map(|d| codec.levels()[0].entry(0)[d] + codec.levels()[1].entry(0)[d]).collect();
        assert_eq!(zero, want);
        assert_eq!(
            codec.decode(&[0, 4]),
            Err(QuantError::CodeOutOfRange { level: 1, id: 4, k: 4 })
        );
        assert_eq!(
            codec.encode(&[1.0]),
            Err(QuantError::DimMismatch { expected: 2, got: 1 })
        );
    }
}
