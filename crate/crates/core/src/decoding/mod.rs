//! Greedy, beam and language-contrastive decoding over any next-token
//! scorer.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::model::{KvCache, ModelParams};
use crate::synthdata::{Template, TokenId, BOS, EOS, PAD};

/// Next-token log-probabilities given a growing prefix.
pub trait Scorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    /// Consumes the prompt; returns the state and next-token log-probs.
    fn start(&self, prompt: &[TokenId]) -> Result<(Self::State, Vec<f64>)>;

    /// Appends `token`; returns next-token log-probs.
    fn advance(&self, state: &mut Self::State, token: TokenId) -> Result<Vec<f64>>;
}

/// Log-softmax with PAD and BOS excluded (probability zero).
pub fn masked_log_softmax(logits: &[f64]) -> Vec<f64> {
    let allowed = |i: usize| i != PAD as usize && i != BOS as usize;
    let m = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| (v - m).exp())
        .sum();
    let lz = m + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v - lz } else { f64::NEG_INFINITY })
        .collect()
}

impl<T: Real> Scorer for ModelParams<T> {
    type State = KvCache<T>;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn start(&self, prompt: &[TokenId]) -> Result<(KvCache<T>, Vec<f64>)> {
        let mut cache = self.new_cache();
        let logits = self.prefill(&mut cache, prompt)?;
        let lp = masked_log_softmax(&logits.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>());
        Ok((cache, lp))
    }

    fn advance(&self, state: &mut KvCache<T>, token: TokenId) -> Result<Vec<f64>> {
        let logits = self.step(state, token)?;
        Ok(masked_log_softmax(&logits.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
    Contrastive,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "contrastive" => Ok(Strategy::Contrastive),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam => "beam",
            Strategy::Contrastive => "contrastive",
        })
    }
}

/// Which instruction the contrastive prompt carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "lang")]
pub enum ContrastTarget {
    /// Source language to itself.
    #[default]
    SourceToSource,
    /// Source language to a fixed language.
    SourceTo(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    /// `None` means `2 * source length + 4`.
    pub max_new_tokens: Option<usize>,
    pub k_shot: usize,
    pub lambda_lang: f64,
    pub template: Template,
    pub contrast: ContrastTarget,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_size: 4,
            max_new_tokens: None,
            k_shot: 0,
            lambda_lang: 0.5,
            template: Template::PreIns,
            contrast: ContrastTarget::SourceToSource,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.lambda_lang >= 0.0 && self.lambda_lang.is_finite()) {
            return Err(Error::Config(format!("lambda_lang must be non-negative, got {}", self.lambda_lang)));
        }
        if self.max_new_tokens == Some(0) {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn max_new_for(&self, src_len: usize) -> usize {
        self.max_new_tokens.unwrap_or(2 * src_len + 4)
    }
}

/// Index of the largest finite score; ties go to the lowest index.
fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() || s == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Generated tokens up to (excluding) EOS, or `max_new` tokens.
pub fn greedy_decode<S: Scorer>(scorer: &S, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    Ok(guided(scorer, prompt, None, 0.0, max_new)?.output().to_vec())
}

/// Greedy over `log p(v | prompt) - lambda * log p(v | contrast)`. With no
/// contrast prompt this is plain greedy decoding.
pub fn contrastive_decode<S: Scorer>(
    scorer: &S,
    prompt: &[TokenId],
    contrast: Option<&[TokenId]>,
    lambda: f64,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    Ok(guided(scorer, prompt, contrast, lambda, max_new)?.output().to_vec())
}

/// Shared greedy loop; `log_prob` is always under the main prompt.
fn guided<S: Scorer>(
    scorer: &S,
    prompt: &[TokenId],
    contrast: Option<&[TokenId]>,
    lambda: f64,
    max_new: usize,
) -> Result<Hypothesis> {
    let (mut st, mut lp) = scorer.start(prompt)?;
    let mut side = match contrast {
        Some(c) if lambda != 0.0 => Some(scorer.start(c)?),
        _ => None,
    };
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_new {
        let scores: Vec<f64> = match &side {
            Some((_, clp)) => lp
                .iter()
                .zip(clp)
                .map(|(&a, &b)| if a == f64::NEG_INFINITY { a } else { a - lambda * b })
                .collect(),
            None => lp.clone(),
        };
        let tok = argmax(&scores).ok_or_else(|| Error::Invalid("no admissible token".into()))? as TokenId;
        h.tokens.push(tok);
        h.log_prob += lp[tok as usize];
        if tok == EOS {
            h.finished = true;
            break;
        }
        if h.tokens.len() == max_new {
            break;
        }
        lp = scorer.advance(&mut st, tok)?;
        if let Some((cst, clp)) = side.as_mut() {
            *clp = scorer.advance(cst, tok)?;
        }
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Generated tokens, including the final EOS when finished.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Mean log-probability per generated token.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    pub fn output(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) if self.finished => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn by_score_then_lex(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over summed log-probabilities; finished hypotheses are
/// ranked by mean log-probability per token. The greedy hypothesis is
/// always among the final candidates, so the result never scores below it.
pub fn beam_search<S: Scorer>(scorer: &S, prompt: &[TokenId], beam_size: usize, max_new: usize) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let (st, lp) = scorer.start(prompt)?;
    let mut live: Vec<(Hypothesis, S::State, Vec<f64>)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        st,
        lp,
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for depth in 1..=max_new {
        // (parent, token, total log-prob)
        let mut cands: Vec<(usize, TokenId, f64)> = Vec::new();
        for (pi, (h, _, lp)) in live.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                if l > f64::NEG_INFINITY {
                    cands.push((pi, tok as TokenId, h.log_prob + l));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                let (ta, tb) = (&live[a.0].0.tokens, &live[b.0].0.tokens);
                ta.iter().chain([&a.1]).cmp(tb.iter().chain([&b.1]))
            })
        });
        cands.truncate(beam_size);
        let mut next = Vec::with_capacity(beam_size);
        for (pi, tok, total) in cands {
            let mut tokens = live[pi].0.tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens,
                    log_prob: total,
                    finished: true,
                });
                continue;
            }
            let h = Hypothesis {
                tokens,
                log_prob: total,
                finished: false,
            };
            if depth == max_new {
                finished.push(h);
                continue;
            }
            let mut st = live[pi].1.clone();
            let lp = scorer.advance(&mut st, tok)?;
            next.push((h, st, lp));
        }
        live = next;
        if finished.len() >= beam_size || live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|(h, _, _)| h));
    if beam_size > 1 {
        finished.push(guided(scorer, prompt, None, 0.0, max_new)?);
    }
    finished.sort_by(by_score_then_lex);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}

pub fn beam_decode<S: Scorer>(scorer: &S, prompt: &[TokenId], beam_size: usize, max_new: usize) -> Result<Vec<TokenId>> {
    Ok(beam_search(scorer, prompt, beam_size, max_new)?.output().to_vec())
}

/// Sum of log-probabilities of `tokens` (then EOS when `with_eos`) after
/// `prompt`.
pub fn continuation_log_prob<S: Scorer>(scorer: &S, prompt: &[TokenId], tokens: &[TokenId], with_eos: bool) -> Result<f64> {
    let (mut st, mut lp) = scorer.start(prompt)?;
    let mut total = 0.0;
    for (i, &t) in tokens.iter().enumerate() {
        total += lp[t as usize];
        if i + 1 < tokens.len() || with_eos {
            lp = scorer.advance(&mut st, t)?;
        }
    }
    if with_eos {
        total += lp[EOS as usize];
    }
    Ok(total)
}

#[cfg(test)]
mod tests;
