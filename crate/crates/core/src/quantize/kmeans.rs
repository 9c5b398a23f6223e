use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{sq_dist, QuantError};
use crate::rng;

/// `k` codewords of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    dim: usize,
    entries: Vec<f64>,
}

impl Codebook {
    pub fn from_entries(dim: usize, entries: Vec<f64>) -> Result<Self, QuantError> {
        if dim == 0 || entries.is_empty() || !entries.len().is_multiple_of(dim) {
            return Err(QuantError::InvalidInput("codebook must hold k >= 1 rows of dim >= 1"));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(QuantError::InvalidInput("non-finite codeword"));
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the closest codeword and its squared distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.entries.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Mean squared distance of `vectors` to their nearest codeword.
    pub fn distortion(&self, vectors: &[f64]) -> f64 {
        let n = vectors.len() / self.dim;
        if n == 0 {
            return 0.0;
        }
        vectors.chunks_exact(self.dim).map(|v| self.nearest(v).1).sum::<f64>() / n as f64
    }

    /// Fraction of codewords that are nearest to at least one vector.
    pub fn utilization(&self, vectors: &[f64]) -> f64 {
        let mut used = vec![false; self.k()];
        for v in vectors.chunks_exact(self.dim) {
            used[self.nearest(v).0] = true;
        }
        used.iter().filter(|&&u| u).count() as f64 / self.k() as f64
    }
}

fn check_vectors(vectors: &[f64], dim: usize, k: usize) -> Result<usize, QuantError> {
    if dim == 0 || k == 0 {
        return Err(QuantError::InvalidInput("dim and k must be positive"));
    }
    if !vectors.len().is_multiple_of(dim) {
        return Err(QuantError::DimMismatch {
            expected: dim,
            got: vectors.len() % dim,
        });
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::InvalidInput("non-finite training vector"));
    }
    let n = vectors.len() / dim;
    if n < k {
        return Err(QuantError::TooFewVectors { n, k });
    }
    Ok(n)
}

/// k-means with farthest-point seeding.
///
/// The first centre is the vector picked by `seed`; each further centre is
/// the vector farthest from all chosen ones. Clusters that empty out during
/// Lloyd iterations are re-seeded to the vector farthest from its centroid.
pub fn train_codebook(vectors: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<Codebook, QuantError> {
    let n = check_vectors(vectors, dim, k)?;
    let mut rng = rng::seeded(seed);
    let first = rng.random_range(0..n);
    let centres = lloyd(vectors, dim, k, iters, Some(first), false);
    Codebook::from_entries(dim, centres)
}

/// Like [`train_codebook`] but codeword 0 is fixed at the origin, so encoding
/// against it can never increase a residual's energy. Seeding starts from
/// that origin, so no random pick is needed.
pub fn train_codebook_pinned(
    vectors: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
) -> Result<Codebook, QuantError> {
    check_vectors(vectors, dim, k)?;
    let centres = lloyd(vectors, dim, k, iters, None, true);
    Codebook::from_entries(dim, centres)
}

fn lloyd(vectors: &[f64], dim: usize, k: usize, iters: usize, first: Option<usize>, pin_zero: bool) -> Vec<f64> {
    let n = vectors.len() / dim;
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];

    // farthest-point seeding
    let mut centres: Vec<f64> = Vec::with_capacity(k * dim);
    let mut min_d = vec![f64::INFINITY; n];
    let push_centre = |centres: &mut Vec<f64>, c: &[f64], min_d: &mut [f64]| {
        centres.extend_from_slice(c);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = sq_dist(row(i), c);
            if nd < *d {
                *d = nd;
            }
        }
    };
    if pin_zero {
        push_centre(&mut centres, &vec![0.0; dim], &mut min_d);
    }
    if let Some(f) = first {
        push_centre(&mut centres, row(f), &mut min_d);
    }
    while centres.len() < k * dim {
        let far = argmax(&min_d);
        push_centre(&mut centres, row(far), &mut min_d);
    }

    let fixed = usize::from(pin_zero);
    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let (best, d) = nearest(&centres, dim, row(i));
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
            dist[i] = d;
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in fixed..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centres[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s * inv;
                }
            } else {
                let far = argmax(&dist);
                centres[c * dim..(c + 1) * dim].copy_from_slice(row(far));
                dist[far] = 0.0;
            }
        }
    }
    centres
}

fn nearest(centres: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centres.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cover_of_distinct_points() {
        let pts = [0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 5.0, 5.0, -1.0, 3.0];
        let cb = train_codebook(&pts, 2, 5, 10, 3).unwrap();
        let mut got: Vec<(i64, i64)> = (0..5).map(|i| (cb.entry(i)[0] as i64, cb.entry(i)[1] as i64)).collect();
        got.sort();
        let mut want: Vec<(i64, i64)> = pts.chunks(2).map(|p| (p[0] as i64, p[1] as i64)).collect();
        want.sort();
        assert_eq!(got, want);
        assert_eq!(cb.distortion(&pts), 0.0);
    }

    #[test]
    fn two_mode_mixture_recovers_mode_means() {
        let mut rng = rng::seeded(5);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..1000 {
            let mode = i % 2;
            let (cx, cy) = if mode == 0 { (-4.0, 1.0) } else { (3.0, -2.0) };
            pts.push(cx + 0.5 * rng::normal(&mut rng));
            pts.push(cy + 0.5 * rng::normal(&mut rng));
            labels.push(mode);
        }
        // oracle: per-mode averages computed from the true labels
        let mut means = [[0.0f64; 2]; 2];
        let mut counts = [0usize; 2];
        for (p, &m) in pts.chunks(2).zip(&labels) {
            means[m][0] += p[0];
            means[m][1] += p[1];
            counts[m] += 1;
        }
        for m in 0..2 {
            means[m][0] /= counts[m] as f64;
            means[m][1] /= counts[m] as f64;
        }
        let cb = train_codebook(&pts, 2, 2, 50, 9).unwrap();
        for mean in means {
            let (i, _) = cb.nearest(&mean);
            let e = cb.entry(i);
            assert!((e[0] - mean[0]).abs() < 0.1 && (e[1] - mean[1]).abs() < 0.1, "{e:?} vs {mean:?}");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut rng = rng::seeded(1);
        let pts: Vec<f64> = (0..600).map(|_| rng::normal(&mut rng)).collect();
        let a = train_codebook(&pts, 3, 16, 20, 42).unwrap();
        let b = train_codebook(&pts, 3, 16, 20, 42).unwrap();
        let bits = |c: &Codebook| c.entries().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn errors() {
        assert_eq!(
            train_codebook(&[0.0, 1.0], 1, 3, 5, 0),
            Err(QuantError::TooFewVectors { n: 2, k: 3 })
        );
        assert!(matches!(
            train_codebook(&[0.0, f64::NAN], 1, 1, 5, 0),
            Err(QuantError::InvalidInput(_))
        ));
    }

    #[test]
    fn pinned_keeps_zero_codeword() {
        let mut rng = rng::seeded(2);
        let pts: Vec<f64> = (0..400).map(|_| 1.0 + rng::normal(&mut rng)).collect();
        let cb = train_codebook_pinned(&pts, 2, 8, 20).unwrap();
        assert_eq!(cb.entry(0), &[0.0, 0.0]);
    }

    #[test]
    fn duplicates_seed_deterministically() {
        let pts = [1.0; 20];
        let cb = train_codebook(&pts, 2, 4, 5, 0).unwrap();
        assert_eq!(cb.k(), 4);
        assert!(cb.utilization(&pts) > 0.0 && cb.utilization(&pts) <= 1.0);
    }
}
