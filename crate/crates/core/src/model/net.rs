//! Forward pass with cached activations and the matching backward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::{Model, ModelError, PrefixMask};

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `x[n×k] · w[k×m]`
pub(crate) fn mm(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x[i * k + p];
            if a == 0.0 {
                continue;
            }
            for (o, b) in row.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                *o += a * b;
            }
        }
    }
    out
}

/// `dy[n×m] · w[k×m]ᵀ`
fn mm_nt(dy: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let g = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = dot(g, &w[p * m..(p + 1) * m]);
        }
    }
    out
}

/// `dw[k×m] += x[n×k]ᵀ · dy[n×m]`
fn mm_acc_tn(dw: &mut [f64], x: &[f64], dy: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let g = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let a = x[i * k + p];
            if a == 0.0 {
                continue;
            }
            for (o, b) in dw[p * m..(p + 1) * m].iter_mut().zip(g) {
                *o += a * b;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise RMS normalization; returns `(g ⊙ x̂, x̂, 1/rms)`.
pub(crate) fn rms_norm(x: &[f64], g: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let r = 1.0 / libm::sqrt(dot(row, row) / d as f64 + RMS_EPS);
        inv[i] = r;
        for c in 0..d {
            xhat[i * d + c] = row[c] * r;
            y[i * d + c] = xhat[i * d + c] * g[c];
        }
    }
    (y, xhat, inv)
}

fn rms_norm_back(dy: &[f64], xhat: &[f64], inv: &[f64], g: &[f64], dg: &mut [f64], dx: &mut [f64], d: usize) {
    for (i, &r) in inv.iter().enumerate() {
        let rows = i * d..(i + 1) * d;
        let (dyr, xh) = (&dy[rows.clone()], &xhat[rows.clone()]);
        let mut mean = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            mean += dyr[c] * g[c] * xh[c];
        }
        mean /= d as f64;
        for c in 0..d {
            dx[i * d + c] += (dyr[c] * g[c] - xh[c] * mean) * r;
        }
    }
}

#[inline]
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + libm::tanh(GELU_C * (u + 0.044715 * u * u * u)))
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = libm::tanh(GELU_C * (u + 0.044715 * u * u * u));
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Ragged storage for attention weights: query row `i` holds
/// `heads × key_end(i)` weights, head-major.
struct AttnRows {
    offsets: Vec<usize>,
    weights: Vec<f64>,
}

impl AttnRows {
    fn new(mask: &PrefixMask, heads: usize) -> Self {
        let mut offsets = Vec::with_capacity(mask.total_len + 1);
        let mut at = 0;
        for i in 0..mask.total_len {
            offsets.push(at);
            at += heads * mask.key_end(i);
        }
        offsets.push(at);
        Self {
            offsets,
            weights: vec![0.0; at],
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        &mut self.weights[a..b]
    }
}

struct LayerCache {
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: AttnRows,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
    h2: Vec<f64>,
    u: Vec<f64>,
    a: Vec<f64>,
}

pub(crate) struct Cache {
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    invf: Vec<f64>,
    hf: Vec<f64>,
    mask: PrefixMask,
}

impl Cache {
    /// Keys and values of layer `l`, row-major `T × d`.
    pub(crate) fn kv(&self, l: usize) -> (&[f64], &[f64]) {
        (&self.layers[l].k, &self.layers[l].v)
    }
}

/// Logits at the requested positions, row-major `positions × vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub positions: Vec<usize>,
    pub logits: Vec<f64>,
}

/// Flat gradient in the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

/// Multi-head attention of one query row against keys `0..key_end`.
/// When `weights` is given it receives the `heads × key_end` softmax rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    key_end: usize,
    heads: usize,
    dh: usize,
    out: &mut [f64],
    mut weights: Option<&mut [f64]>,
) {
    let d = heads * dh;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut s = vec![0.0; key_end];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut max = f64::NEG_INFINITY;
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = scale * dot(qh, &k[j * d + h * dh..j * d + (h + 1) * dh]);
            max = max.max(*sj);
        }
        let mut z = 0.0;
        for sj in s.iter_mut() {
            *sj = libm::exp(*sj - max);
            z += *sj;
        }
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.fill(0.0);
        for (j, sj) in s.iter_mut().enumerate() {
            *sj /= z;
            for (o, vv) in oh.iter_mut().zip(&v[j * d + h * dh..j * d + (h + 1) * dh]) {
                *o += *sj * vv;
            }
        }
        if let Some(w) = weights.as_deref_mut() {
            w[h * key_end..(h + 1) * key_end].copy_from_slice(&s);
        }
    }
}

impl Model {
    /// Forward pass over `tokens` under a prefix mask, returning logits at
    /// `positions` and the activation cache.
    pub(crate) fn forward_cached(
        &self,
        tokens: &[u32],
        prefix_len: usize,
        positions: &[usize],
    ) -> Result<(ForwardOutput, Cache), ModelError> {
        self.check_tokens(tokens)?;
        let mask = PrefixMask::new(prefix_len, tokens.len())?;
        let c = &self.config;
        let (t, d, m, v, heads) = (tokens.len(), c.embed_dim, c.mlp_dim, c.vocab_size, c.num_heads);
        let dh = c.head_dim();
        let p = &self.params;
        let lay = &self.layout;

        let mut x = vec![0.0; t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &p[lay.tok + tok as usize * d..][..d];
            let pe = &p[lay.pos + i * d..][..d];
            for ((xo, a), b) in x[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
                *xo = a + b;
            }
        }

        let mut layers = Vec::with_capacity(c.num_layers);
        for l in &lay.layers {
            let (h1, xhat1, inv1) = rms_norm(&x, &p[l.ln1..l.ln1 + d], d);
            let q = mm(&h1, &p[l.wq..l.wq + d * d], t, d, d);
            let k = mm(&h1, &p[l.wk..l.wk + d * d], t, d, d);
            let vv = mm(&h1, &p[l.wv..l.wv + d * d], t, d, d);
            let mut att = AttnRows::new(&mask, heads);
            let mut o = vec![0.0; t * d];
            for i in 0..t {
                attend(
                    &q[i * d..(i + 1) * d],
                    &k,
                    &vv,
                    mask.key_end(i),
                    heads,
                    dh,
                    &mut o[i * d..(i + 1) * d],
                    Some(att.row_mut(i)),
                );
            }
            let attn = mm(&o, &p[l.wo..l.wo + d * d], t, d, d);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
            let (h2, xhat2, inv2) = rms_norm(&x, &p[l.ln2..l.ln2 + d], d);
            let mut u = mm(&h2, &p[l.w1..l.w1 + d * m], t, d, m);
            for row in u.chunks_exact_mut(m) {
                row.iter_mut().zip(&p[l.b1..l.b1 + m]).for_each(|(a, b)| *a += b);
            }
            let a: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
            let mlp = mm(&a, &p[l.w2..l.w2 + m * d], t, m, d);
            for (i, xv) in x.iter_mut().enumerate() {
                *xv += mlp[i] + p[l.b2 + i % d];
            }
            layers.push(LayerCache {
                xhat1,
                inv1,
                h1,
                q,
                k,
                v: vv,
                att,
                o,
                xhat2,
                inv2,
                h2,
                u,
                a,
            });
        }
        let (hf, xhatf, invf) = rms_norm(&x, &p[lay.lnf..lay.lnf + d], d);
        let mut logits = Vec::with_capacity(positions.len() * v);
        for &pos in positions {
            logits.extend(self.project(&hf[pos * d..(pos + 1) * d]));
        }
        Ok((
            ForwardOutput {
                positions: positions.to_vec(),
                logits,
            },
            Cache {
                layers,
                xhatf,
                invf,
                hf,
                mask,
            },
        ))
    }

    /// Output projection of one final hidden row.
    pub(crate) fn project(&self, h: &[f64]) -> Vec<f64> {
        let (d, v) = (self.config.embed_dim, self.config.vocab_size);
        let p = &self.params;
        let mut row = p[self.layout.bout..self.layout.bout + v].to_vec();
        for (c, &hc) in h.iter().enumerate().take(d) {
            for (r, w) in row.iter_mut().zip(&p[self.layout.wout + c * v..][..v]) {
                *r += hc * w;
            }
        }
        row
    }

    /// Logits at every position, row-major `T × vocab`.
    pub fn forward(&self, tokens: &[u32], prefix_len: usize) -> Result<Vec<f64>, ModelError> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        Ok(self.forward_cached(tokens, prefix_len, &positions)?.0.logits)
    }

    /// Positions whose next-token prediction falls inside `span`.
    fn span_positions(tokens: &[u32], span: (usize, usize)) -> Result<Vec<usize>, ModelError> {
        if span.0 == 0 || span.0 >= span.1 || span.1 > tokens.len() {
            return Err(ModelError::NoTargetTokens);
        }
        Ok((span.0 - 1..span.1 - 1).collect())
    }

    /// Per-token NLL of the tokens in `span`, with the prefix boundary at
    /// `span.0`.
    pub fn target_nll(&self, tokens: &[u32], span: (usize, usize)) -> Result<Vec<f64>, ModelError> {
        let pos = Self::span_positions(tokens, span)?;
        let (out, _) = self.forward_cached(tokens, span.0, &pos)?;
        let v = self.config.vocab_size;
        Ok(pos
            .iter()
            .enumerate()
            .map(|(r, &p)| {
                let row = &out.logits[r * v..(r + 1) * v];
                log_sum_exp(row) - row[tokens[p + 1] as usize]
            })
            .collect())
    }

    /// Mean target-span cross-entropy.
    pub fn loss(&self, tokens: &[u32], span: (usize, usize)) -> Result<f64, ModelError> {
        let nll = self.target_nll(tokens, span)?;
        Ok(nll.iter().sum::<f64>() / nll.len() as f64)
    }

    /// `exp` of the mean target-span NLL.
    pub fn sequence_perplexity(&self, tokens: &[u32], span: (usize, usize)) -> Result<f64, ModelError> {
        Ok(libm::exp(self.loss(tokens, span)?))
    }

    /// Mean target-span cross-entropy scaled by `weight`, and its gradient
    /// added into `grad`.
    pub fn accumulate_grad(
        &self,
        tokens: &[u32],
        span: (usize, usize),
        weight: f64,
        grad: &mut Gradients,
    ) -> Result<f64, ModelError> {
        let positions = Self::span_positions(tokens, span)?;
        let (out, cache) = self.forward_cached(tokens, span.0, &positions)?;
        let c = &self.config;
        let (t, d, m, v, heads) = (tokens.len(), c.embed_dim, c.mlp_dim, c.vocab_size, c.num_heads);
        let dh = c.head_dim();
        let p = &self.params;
        let lay = &self.layout;
        let g = &mut grad.0;
        let n = positions.len() as f64;

        // softmax cross-entropy at the target positions
        let mut loss = 0.0;
        let mut dhf = vec![0.0; t * d];
        for (r, &pos) in positions.iter().enumerate() {
            let row = &out.logits[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            let target = tokens[pos + 1] as usize;
            loss += lse - row[target];
            let mut dl: Vec<f64> = row.iter().map(|&z| libm::exp(z - lse) * weight / n).collect();
            dl[target] -= weight / n;
            g[lay.bout..lay.bout + v].iter_mut().zip(&dl).for_each(|(a, b)| *a += b);
            let h = &cache.hf[pos * d..(pos + 1) * d];
            for cidx in 0..d {
                let wrow = &p[lay.wout + cidx * v..][..v];
                dhf[pos * d + cidx] = dot(&dl, wrow);
                let hc = h[cidx];
                for (a, b) in g[lay.wout + cidx * v..][..v].iter_mut().zip(&dl) {
                    *a += hc * b;
                }
            }
        }
        let mut dx = vec![0.0; t * d];
        rms_norm_back(
            &dhf,
            &cache.xhatf,
            &cache.invf,
            &p[lay.lnf..lay.lnf + d],
            &mut g[lay.lnf..lay.lnf + d],
            &mut dx,
            d,
        );

        for (l, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // MLP
            g[l.b2..l.b2 + d]
                .iter_mut()
                .enumerate()
                .for_each(|(cidx, a)| *a += (0..t).map(|i| dx[i * d + cidx]).sum::<f64>());
            mm_acc_tn(&mut g[l.w2..l.w2 + m * d], &lc.a, &dx, t, m, d);
            let mut du = mm_nt(&dx, &p[l.w2..l.w2 + m * d], t, m, d);
            for (x, &u) in du.iter_mut().zip(&lc.u) {
                *x *= gelu_grad(u);
            }
            for row in du.chunks_exact(m) {
                g[l.b1..l.b1 + m].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            mm_acc_tn(&mut g[l.w1..l.w1 + d * m], &lc.h2, &du, t, d, m);
            let dh2 = mm_nt(&du, &p[l.w1..l.w1 + d * m], t, d, m);
            rms_norm_back(
                &dh2,
                &lc.xhat2,
                &lc.inv2,
                &p[l.ln2..l.ln2 + d],
                &mut g[l.ln2..l.ln2 + d],
                &mut dx,
                d,
            );

            // attention
            mm_acc_tn(&mut g[l.wo..l.wo + d * d], &lc.o, &dx, t, d, d);
            let d_o = mm_nt(&dx, &p[l.wo..l.wo + d * d], t, d, d);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let scale = 1.0 / libm::sqrt(dh as f64);
            for h in 0..heads {
                let hs = h * dh..(h + 1) * dh;
                for i in 0..t {
                    let end = cache.mask.key_end(i);
                    let a = &lc.att.row(i)[h * end..(h + 1) * end];
                    let doi = &d_o[i * d + hs.start..i * d + hs.end];
                    let mut da = vec![0.0; a.len()];
                    let mut s = 0.0;
                    for (j, (daj, &aj)) in da.iter_mut().zip(a).enumerate() {
                        let vj = j * d + hs.start..j * d + hs.end;
                        *daj = dot(doi, &lc.v[vj.clone()]);
                        s += aj * *daj;
                        for (x, y) in dv[vj].iter_mut().zip(doi) {
                            *x += aj * y;
                        }
                    }
                    let qi = i * d + hs.start..i * d + hs.end;
                    for (j, (&daj, &aj)) in da.iter().zip(a).enumerate() {
                        let ds = aj * (daj - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = j * d + hs.start..j * d + hs.end;
                        for c2 in 0..dh {
                            dq[qi.start + c2] += ds * lc.k[kj.start + c2];
                            dk[kj.start + c2] += ds * lc.q[qi.start + c2];
                        }
                    }
                }
            }
            mm_acc_tn(&mut g[l.wq..l.wq + d * d], &lc.h1, &dq, t, d, d);
            mm_acc_tn(&mut g[l.wk..l.wk + d * d], &lc.h1, &dk, t, d, d);
            mm_acc_tn(&mut g[l.wv..l.wv + d * d], &lc.h1, &dv, t, d, d);
            let mut dh1 = mm_nt(&dq, &p[l.wq..l.wq + d * d], t, d, d);
            for (src, w) in [(&dk, l.wk), (&dv, l.wv)] {
                let part = mm_nt(src, &p[w..w + d * d], t, d, d);
                dh1.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
            rms_norm_back(
                &dh1,
                &lc.xhat1,
                &lc.inv1,
                &p[l.ln1..l.ln1 + d],
                &mut g[l.ln1..l.ln1 + d],
                &mut dx,
                d,
            );
        }

        for (i, &tok) in tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            g[lay.tok + tok as usize * d..][..d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            g[lay.pos + i * d..][..d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        Ok(weight * loss / n)
    }

    pub fn zero_grad(&self) -> Gradients {
        Gradients(vec![0.0; self.layout.total])
    }

    /// Mean target-span loss and its gradient for one sequence.
    pub fn loss_and_grad(&self, tokens: &[u32], span: (usize, usize)) -> Result<(f64, Gradients), ModelError> {
        let mut g = self.zero_grad();
        let loss = self.accumulate_grad(tokens, span, 1.0, &mut g)?;
        Ok((loss, g))
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(row.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// Mean next-token cross-entropy over predictions of the tokens in `span`,
/// from full `T × vocab` logits.
pub fn span_cross_entropy(logits: &[f64], vocab: usize, tokens: &[u32], span: (usize, usize)) -> Result<f64, ModelError> {
    if span.0 == 0 || span.0 >= span.1 || span.1 > tokens.len() || logits.len() < tokens.len() * vocab {
        return Err(ModelError::NoTargetTokens);
    }
    let mut total = 0.0;
    for p in span.0 - 1..span.1 - 1 {
        let row = &logits[p * vocab..(p + 1) * vocab];
        total += log_sum_exp(row) - row[tokens[p + 1] as usize];
    }
    Ok(total / (span.1 - span.0) as f64)
}
