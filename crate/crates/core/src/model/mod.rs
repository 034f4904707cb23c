//! Decoder-only causal transformer: pre-norm blocks, learned positions,
//! output projection tied to the token embedding.

mod checkpoint;
mod infer;

pub use checkpoint::{
    checkpoint_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, write_atomic,
    hex, CheckpointHeader, TensorEntry, FORMAT_VERSION,
};
pub use infer::KvCache;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};
use crate::synthdata::{FormattedSample, TokenId, PAD};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 77,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 256,
            // room for five demonstrations plus the query
            max_context: 192,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ffn,
            self.max_context,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        param_layout(self).iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

const PER_LAYER: usize = 12;
const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

// Offsets within a layer block.
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W1: usize = 8;
const B1: usize = 9;
const W2: usize = 10;
const B2: usize = 11;

fn param_layout(c: &ModelConfig) -> Vec<ParamSpec> {
    let spec = |name: String, shape: Vec<usize>, init| ParamSpec { name, shape, init };
    let d = c.d_model;
    let mut out = vec![
        spec("tok_emb".into(), vec![c.vocab_size, d], Init::Normal),
        spec("pos_emb".into(), vec![c.max_context, d], Init::Normal),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            spec(p("ln1.gain"), vec![d], Init::Ones),
            spec(p("ln1.bias"), vec![d], Init::Zeros),
            spec(p("attn.wq"), vec![d, d], Init::Normal),
            spec(p("attn.wk"), vec![d, d], Init::Normal),
            spec(p("attn.wv"), vec![d, d], Init::Normal),
            spec(p("attn.wo"), vec![d, d], Init::Normal),
            spec(p("ln2.gain"), vec![d], Init::Ones),
            spec(p("ln2.bias"), vec![d], Init::Zeros),
            spec(p("ffn.w1"), vec![d, c.d_ffn], Init::Normal),
            spec(p("ffn.b1"), vec![c.d_ffn], Init::Zeros),
            spec(p("ffn.w2"), vec![c.d_ffn, d], Init::Normal),
            spec(p("ffn.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.push(spec("ln_f.gain".into(), vec![d], Init::Ones));
    out.push(spec("ln_f.bias".into(), vec![d], Init::Zeros));
    out
}

/// Model weights in canonical order (see [`ModelParams::names`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    config: ModelConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Normal(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
        let tensors = param_layout(config)
            .into_iter()
            .map(|p| {
                let n: usize = p.shape.iter().product();
                let data: Vec<T> = match p.init {
                    Init::Normal => (0..n).map(|_| T::cst(normal.sample(&mut rng))).collect(),
                    Init::Ones => vec![T::one(); n],
                    Init::Zeros => vec![T::zero(); n],
                };
                Tensor::from_parts(p.shape, data)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        if layout.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&tensors) {
            if spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, got {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> Vec<String> {
        param_layout(&self.config).into_iter().map(|p| p.name).collect()
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names().iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    fn layer(&self, l: usize, which: usize) -> &Tensor<T> {
        &self.tensors[2 + l * PER_LAYER + which]
    }

    fn final_norm(&self) -> (&Tensor<T>, &Tensor<T>) {
        let n = self.tensors.len();
        (&self.tensors[n - 2], &self.tensors[n - 1])
    }

    /// Registers every tensor as a gradient-requiring leaf.
    pub fn attach(&self, g: &mut Graph<T>) -> ParamNodes {
        ParamNodes {
            config: self.config.clone(),
            ids: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }
}

/// Parameter leaves of one graph, parallel to [`ModelParams::tensors`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    config: ModelConfig,
    ids: Vec<NodeId>,
}

impl ParamNodes {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn layer(&self, l: usize, which: usize) -> NodeId {
        self.ids[2 + l * PER_LAYER + which]
    }

    /// Logits `[batch, time, vocab]` for right-padded `batch`; row `t`
    /// scores the token at `t + 1`. Keys holding `pad_id` are masked.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, batch: &[Vec<TokenId>], pad_id: TokenId) -> Result<NodeId> {
        let c = &self.config;
        let b = batch.len();
        let t = batch.iter().map(Vec::len).max().unwrap_or(0);
        if b == 0 || t == 0 {
            return Err(Error::Invalid("forward on an empty batch".into()));
        }
        if t > c.max_context {
            return Err(Error::ContextOverflow {
                len: t,
                limit: c.max_context,
            });
        }
        let mut ids = Vec::with_capacity(b * t);
        let mut key_pad = Vec::with_capacity(b * t);
        for seq in batch {
            for i in 0..t {
                let tok = seq.get(i).copied().unwrap_or(pad_id);
                if tok as usize >= c.vocab_size {
                    return Err(Error::Index {
                        op: "forward",
                        index: tok as usize,
                        limit: c.vocab_size,
                    });
                }
                ids.push(tok as usize);
                key_pad.push(tok == pad_id);
            }
        }
        let has_pad = key_pad.iter().any(|&p| p);
        let (d, dh) = (c.d_model, c.head_dim());

        let tok = g.embedding(self.ids[TOK_EMB], &ids, &[b, t])?;
        let pos = g.slice(self.ids[POS_EMB], 0, 0, t)?;
        let mut x = g.add(tok, pos)?;
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 0..c.n_layers {
            let h = g.layer_norm(x, self.layer(l, LN1_G), self.layer(l, LN1_B), LN_EPS)?;
            let h2d = g.reshape(h, &[b * t, d])?;
            let proj = |w: usize, g: &mut Graph<T>| -> Result<NodeId> {
                let y = g.matmul(h2d, self.layer(l, w))?;
                g.reshape(y, &[b, t, d])
            };
            let q = proj(WQ, g)?;
            let k = proj(WK, g)?;
            let v = proj(WV, g)?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice(q, 2, lo, hi)?;
                let kh = g.slice(k, 2, lo, hi)?;
                let vh = g.slice(v, 2, lo, hi)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let masked = g.causal_mask(scores, has_pad.then(|| key_pad.clone()))?;
                let probs = g.softmax(masked)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let att = if heads.len() == 1 { heads[0] } else { g.concat_last(&heads)? };
            let att = g.reshape(att, &[b * t, d])?;
            let att = g.matmul(att, self.layer(l, WO))?;
            let att = g.reshape(att, &[b, t, d])?;
            x = g.add(x, att)?;

            let h = g.layer_norm(x, self.layer(l, LN2_G), self.layer(l, LN2_B), LN_EPS)?;
            let h = g.reshape(h, &[b * t, d])?;
            let f = g.matmul(h, self.layer(l, W1))?;
            let f = g.add(f, self.layer(l, B1))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, self.layer(l, W2))?;
            let f = g.add(f, self.layer(l, B2))?;
            let f = g.reshape(f, &[b, t, d])?;
            x = g.add(x, f)?;
        }
        let n = self.ids.len();
        let x = g.layer_norm(x, self.ids[n - 2], self.ids[n - 1], LN_EPS)?;
        let x = g.reshape(x, &[b * t, d])?;
        let emb_t = g.transpose(self.ids[TOK_EMB])?;
        let logits = g.matmul(x, emb_t)?;
        g.reshape(logits, &[b, t, c.vocab_size])
    }

    /// Log-probabilities of every target token of every sample, from a
    /// single batched forward pass. Returns a flat node and, per sample,
    /// the index range of its target tokens in that node.
    pub fn target_log_probs<T: Real>(
        &self,
        g: &mut Graph<T>,
        samples: &[FormattedSample],
    ) -> Result<(NodeId, Vec<std::ops::Range<usize>>)> {
        let (inputs, targets, masks) = shift_for_next_token(samples)?;
        let logits = self.forward(g, &inputs, PAD)?;
        let lsm = g.log_softmax(logits)?;
        let (t, v) = (g.shape(logits)[1], self.config.vocab_size);
        let mut offsets = Vec::new();
        let mut ranges = Vec::with_capacity(samples.len());
        for (bi, (tg, mk)) in targets.iter().zip(&masks).enumerate() {
            let start = offsets.len();
            for (ti, (&tok, &m)) in tg.iter().zip(mk).enumerate() {
                if m {
                    offsets.push((bi * t + ti) * v + tok as usize);
                }
            }
            if offsets.len() == start {
                return Err(Error::EmptyTarget);
            }
            ranges.push(start..offsets.len());
        }
        Ok((g.gather(lsm, offsets)?, ranges))
    }

    /// `Σ_t log p(target_t | prompt, target_<t)`, differentiable.
    pub fn sequence_log_prob<T: Real>(
        &self,
        g: &mut Graph<T>,
        prompt: &[TokenId],
        target: &[TokenId],
    ) -> Result<NodeId> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let mut loss_mask = vec![false; prompt.len()];
        loss_mask.resize(prompt.len() + target.len(), true);
        let sample = FormattedSample {
            prompt: prompt.to_vec(),
            target: target.to_vec(),
            loss_mask,
        };
        let (lp, _) = self.target_log_probs(g, std::slice::from_ref(&sample))?;
        g.sum(lp)
    }
}

/// Teacher-forcing view of formatted samples: inputs drop the last token,
/// targets drop the first, and the mask follows the targets.
pub fn shift_for_next_token(
    samples: &[FormattedSample],
) -> Result<(Vec<Vec<TokenId>>, Vec<Vec<TokenId>>, Vec<Vec<bool>>)> {
    let mut inputs = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        let toks = s.tokens();
        if toks.len() < 2 || s.loss_mask.len() != toks.len() {
            return Err(Error::Invalid("sample too short or mask length mismatch".into()));
        }
        if s.loss_mask[0] {
            return Err(Error::Invalid("first position cannot be a target".into()));
        }
        inputs.push(toks[..toks.len() - 1].to_vec());
        targets.push(toks[1..].to_vec());
        masks.push(s.loss_mask[1..].to_vec());
    }
    Ok((inputs, targets, masks))
}

/// Convenience: logits of a single unpadded sequence, evaluated without
/// recording gradients.
pub fn logits<T: Real>(params: &ModelParams<T>, batch: &[Vec<TokenId>]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let nodes = ParamNodes {
        config: params.config.clone(),
        ids,
    };
    let out = nodes.forward(&mut g, batch, PAD)?;
    Ok(g.value(out).clone())
}
