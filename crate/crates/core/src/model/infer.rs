//! Incremental inference with cached keys and values. Computes the same
//! function as the graph forward, one token at a time.

use super::{ModelParams, B1, B2, LN1_B, LN1_G, LN2_B, LN2_G, LN_EPS, POS_EMB, TOK_EMB, W1, W2, WK, WO, WQ, WV};
use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::synthdata::TokenId;

#[derive(Clone, Debug)]
pub struct KvCache<T = f32> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// `out = x · w` for row-major `w: [x.len(), out.len()]`.
fn vec_mat<T: Real>(x: &[T], w: &[T], out: &mut [T]) {
    let n = out.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o = *o + xi * wij;
        }
    }
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    let n = T::cst(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + T::cst(LN_EPS)).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::cst((2.0 / std::f64::consts::PI).sqrt());
    let half = T::cst(0.5);
    half * x * (T::one() + (c * (x + T::cst(0.044715) * x * x * x)).tanh())
}

impl<T: Real> ModelParams<T> {
    pub fn new_cache(&self) -> KvCache<T> {
        let n = self.config.n_layers;
        KvCache {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Appends `token` at the next position and returns next-token logits.
    pub fn step(&self, cache: &mut KvCache<T>, token: TokenId) -> Result<Vec<T>> {
        let c = &self.config;
        let (d, dh, pos) = (c.d_model, c.head_dim(), cache.len);
        if pos >= c.max_context {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                limit: c.max_context,
            });
        }
        let tok = token as usize;
        if tok >= c.vocab_size {
            return Err(Error::Index {
                op: "step",
                index: tok,
                limit: c.vocab_size,
            });
        }
        let emb = self.tensors[TOK_EMB].data();
        let pe = self.tensors[POS_EMB].data();
        let mut x: Vec<T> = (0..d).map(|i| emb[tok * d + i] + pe[pos * d + i]).collect();
        let scale = T::cst(1.0 / (dh as f64).sqrt());
        let mut q = vec![T::zero(); d];
        let mut k = vec![T::zero(); d];
        let mut v = vec![T::zero(); d];
        let mut tmp = vec![T::zero(); d];
        let mut hidden = vec![T::zero(); c.d_ffn];

        for l in 0..c.n_layers {
            let p = |w| self.layer(l, w).data();
            let h = layer_norm(&x, p(LN1_G), p(LN1_B));
            vec_mat(&h, p(WQ), &mut q);
            vec_mat(&h, p(WK), &mut k);
            vec_mat(&h, p(WV), &mut v);
            cache.keys[l].extend_from_slice(&k);
            cache.values[l].extend_from_slice(&v);
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let t = pos + 1;
            let mut att = vec![T::zero(); d];
            let mut scores = vec![T::zero(); t];
            for hd in 0..c.n_heads {
                let lo = hd * dh;
                let qh = &q[lo..lo + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + lo..j * d + lo + dh];
                    *s = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z = z + *s;
                }
                let out = &mut att[lo..lo + dh];
                for (j, &s) in scores.iter().enumerate() {
                    let w = s / z;
                    let vj = &values[j * d + lo..j * d + lo + dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o = *o + w * vv;
                    }
                }
            }
            vec_mat(&att, p(WO), &mut tmp);
            x.iter_mut().zip(&tmp).for_each(|(a, &b)| *a = *a + b);

            let h = layer_norm(&x, p(LN2_G), p(LN2_B));
            vec_mat(&h, p(W1), &mut hidden);
            for (hv, &b) in hidden.iter_mut().zip(p(B1)) {
                *hv = gelu(*hv + b);
            }
            vec_mat(&hidden, p(W2), &mut tmp);
            for ((a, &f), &b) in x.iter_mut().zip(&tmp).zip(p(B2)) {
                *a = *a + f + b;
            }
        }
        cache.len += 1;
        let (g, b) = self.final_norm();
        let h = layer_norm(&x, g.data(), b.data());
        Ok(emb
            .chunks_exact(d)
            .map(|row| row.iter().zip(&h).map(|(&e, &hv)| e * hv).sum())
            .collect())
    }

    /// Feeds `tokens` in order; returns the logits after the last one.
    pub fn prefill(&self, cache: &mut KvCache<T>, tokens: &[TokenId]) -> Result<Vec<T>> {
        let mut last = None;
        for &t in tokens {
            last = Some(self.step(cache, t)?);
        }
        last.ok_or_else(|| Error::Invalid("prefill with no tokens".into()))
    }
}
