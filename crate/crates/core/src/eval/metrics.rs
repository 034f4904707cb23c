use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::synthdata::{TokenId, Vocabulary};

/// Language holding a strict majority of the content tokens, if any.
pub fn detect_language(tokens: &[TokenId], vocab: &Vocabulary) -> Option<usize> {
    let mut counts = vec![0usize; vocab.num_languages];
    for &t in tokens {
        if let Some(l) = vocab.language_of(t) {
            counts[l] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().position(|&c| 2 * c > total)
}

/// Fraction of hypotheses not detected as `target`; undetectable outputs
/// count as off-target.
pub fn otr(hypotheses: &[Vec<TokenId>], target: usize, vocab: &Vocabulary) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid("off-target ratio of an empty list".into()));
    }
    let off = hypotheses
        .iter()
        .filter(|h| detect_language(h, vocab) != Some(target))
        .count();
    Ok(off as f64 / hypotheses.len() as f64)
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU in `[0, 100]` without smoothing.
pub fn bleu(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() || max_n == 0 {
        return Err(Error::Invalid("bleu needs references and max_n >= 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut possible = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&possible)
        .map(|(&m, &p)| (m as f64 / p as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Mean over pairs of positional matches divided by the longer length.
pub fn token_accuracy(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Invalid("token accuracy of an empty list".into()));
    }
    let sum: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| {
            let denom = h.len().max(r.len());
            if denom == 0 {
                return 1.0;
            }
            h.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / denom as f64
        })
        .sum();
    Ok(sum / hypotheses.len() as f64)
}
