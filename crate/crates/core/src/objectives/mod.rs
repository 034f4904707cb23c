//! Training losses: likelihood on correct samples, unlikelihood on samples
//! whose instruction conflicts with the reference, and their mixture.

pub mod gradcheck;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Real};
use crate::error::{Error, Result};
use crate::model::{shift_for_next_token, ParamNodes};
use crate::synthdata::{FormattedSample, TokenId, PAD};

/// Upper clamp on a sequence log-probability before `log(1 - exp(s))`.
pub const SEQ_LOGP_MAX: f64 = -1e-6;
/// Upper clamp on a token probability before `log(1 - p)`.
pub const TOKEN_P_MAX: f64 = 1.0 - 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UlMode {
    #[default]
    Sequence,
    Token,
}

impl std::str::FromStr for UlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(UlMode::Sequence),
            "token" => Ok(UlMode::Token),
            other => Err(Error::Config(format!("unknown ul mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mle: f64,
    pub ul: f64,
    pub total: f64,
    pub alpha: f64,
    pub mle_samples: usize,
    pub ul_samples: usize,
}

/// Mean over masked positions of `-log softmax(logits)[target]`.
/// `logits` is `[batch, time, vocab]`; `targets` and `mask` are per row and
/// may be shorter than `time`.
pub fn mle_loss<T: Real>(g: &mut Graph<T>, logits: NodeId, targets: &[Vec<TokenId>], mask: &[Vec<bool>]) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || targets.len() != shape[0] || mask.len() != shape[0] {
        return Err(Error::Shape {
            op: "mle_loss",
            shapes: vec![shape, vec![targets.len()], vec![mask.len()]],
        });
    }
    let (t, v) = (shape[1], shape[2]);
    let mut offsets = Vec::new();
    for (b, (tg, mk)) in targets.iter().zip(mask).enumerate() {
        if tg.len() != mk.len() || tg.len() > t {
            return Err(Error::Shape {
                op: "mle_loss",
                shapes: vec![shape.clone(), vec![tg.len()], vec![mk.len()]],
            });
        }
        for (i, (&tok, &m)) in tg.iter().zip(mk).enumerate() {
            if m {
                if tok as usize >= v {
                    return Err(Error::Index {
                        op: "mle_loss",
                        index: tok as usize,
                        limit: v,
                    });
                }
                offsets.push((b * t + i) * v + tok as usize);
            }
        }
    }
    if offsets.is_empty() {
        return Err(Error::EmptyMask);
    }
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather(lsm, offsets)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// Unlikelihood from per-token log-probabilities `lp` (flat), grouped into
/// samples by `ranges`. Each sample contributes `-log(1 - P(y))`
/// (sequence mode) or the mean over its tokens of `-log(1 - p(y_t))`
/// (token mode); the result is the mean contribution.
pub fn ul_from_log_probs<T: Real>(g: &mut Graph<T>, lp: NodeId, ranges: &[Range<usize>], mode: UlMode) -> Result<NodeId> {
    if ranges.is_empty() {
        return Err(Error::Invalid("unlikelihood on an empty batch".into()));
    }
    let mut per_sample = Vec::with_capacity(ranges.len());
    for r in ranges {
        if r.is_empty() {
            return Err(Error::EmptyTarget);
        }
        let part = g.slice(lp, 0, r.start, r.end)?;
        let c = match mode {
            UlMode::Sequence => {
                let s = g.sum(part)?;
                g.log1mexp(s, SEQ_LOGP_MAX)?
            }
            UlMode::Token => {
                let l = g.log1mexp(part, TOKEN_P_MAX.ln())?;
                g.mean(l)?
            }
        };
        per_sample.push(c);
    }
    let all = if per_sample.len() == 1 {
        per_sample[0]
    } else {
        g.concat_last(&per_sample)?
    };
    let mean = g.mean(all)?;
    g.scale(mean, -1.0)
}

/// Unlikelihood of each sample's target under its (conflicting) prompt.
pub fn ul_loss<T: Real>(g: &mut Graph<T>, params: &ParamNodes, conflicting: &[FormattedSample], mode: UlMode) -> Result<NodeId> {
    let (lp, ranges) = params.target_log_probs(g, conflicting)?;
    ul_from_log_probs(g, lp, &ranges, mode)
}

/// Likelihood over a batch of formatted samples.
pub fn mle_loss_on<T: Real>(g: &mut Graph<T>, params: &ParamNodes, samples: &[FormattedSample]) -> Result<NodeId> {
    let (inputs, targets, mask) = shift_for_next_token(samples)?;
    let logits = params.forward(g, &inputs, PAD)?;
    mle_loss(g, logits, &targets, &mask)
}

/// `total = mle + alpha * ul` with the pieces kept for logging.
pub fn mixed_loss(mle: f64, ul: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be a finite non-negative number, got {alpha}")));
    }
    let total = mle + alpha * ul;
    for (what, v) in [("mle", mle), ("ul", ul), ("total", total)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what} loss = {v}")));
        }
    }
    Ok(LossBreakdown {
        mle,
        ul,
        total,
        alpha,
        mle_samples: 0,
        ul_samples: 0,
    })
}

/// Differentiable mixture from one shared forward pass over
/// `positives ++ conflicting`. Returns `(total, mle, ul)` nodes.
pub fn mixed_loss_graph<T: Real>(
    g: &mut Graph<T>,
    params: &ParamNodes,
    positives: &[FormattedSample],
    conflicting: &[FormattedSample],
    alpha: f64,
    mode: UlMode,
) -> Result<(NodeId, NodeId, NodeId)> {
    if positives.is_empty() || conflicting.is_empty() {
        return Err(Error::Invalid("mixed loss needs both positive and conflicting samples".into()));
    }
    mixed_loss(0.0, 0.0, alpha)?;
    let all: Vec<FormattedSample> = positives.iter().chain(conflicting).cloned().collect();
    let (lp, ranges) = params.target_log_probs(g, &all)?;
    let n_pos = ranges[positives.len() - 1].end;
    let pos = g.slice(lp, 0, 0, n_pos)?;
    let mle = g.mean(pos)?;
    let mle = g.scale(mle, -1.0)?;
    let neg: Vec<Range<usize>> = ranges[positives.len()..].to_vec();
    let ul = ul_from_log_probs(g, lp, &neg, mode)?;
    let weighted = g.scale(ul, alpha)?;
    let total = g.add(mle, weighted)?;
    Ok((total, mle, ul))
}
