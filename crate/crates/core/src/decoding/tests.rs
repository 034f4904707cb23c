use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::objectives::gradcheck::{noisy_params, tiny_model_config};

/// Log-probabilities as a function of the generated prefix only.
struct Toy<F: Fn(&[TokenId]) -> Vec<f64>> {
    vocab: usize,
    table: F,
}

impl<F: Fn(&[TokenId]) -> Vec<f64>> Scorer for Toy<F> {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, _prompt: &[TokenId]) -> Result<(Vec<TokenId>, Vec<f64>)> {
        Ok((Vec::new(), (self.table)(&[])))
    }

    fn advance(&self, state: &mut Vec<TokenId>, token: TokenId) -> Result<Vec<f64>> {
        state.push(token);
        Ok((self.table)(state))
    }
}

const NEG: f64 = f64::NEG_INFINITY;

fn probs(ps: &[(TokenId, f64)], vocab: usize) -> Vec<f64> {
    let mut out = vec![NEG; vocab];
    for &(t, p) in ps {
        out[t as usize] = p.ln();
    }
    out
}

fn random_prompt(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<TokenId> {
    let len = rng.random_range(2..8);
    let mut p = vec![BOS];
    p.extend((0..len).map(|_| rng.random_range(3..vocab as TokenId)));
    p
}

#[test]
fn forced_model_emits_token_then_stops() {
    let toy = Toy {
        vocab: 6,
        table: |prefix: &[TokenId]| {
            let mut logits = vec![0.0; 6];
            logits[if prefix.is_empty() { 5 } else { EOS as usize }] = 10.0;
            masked_log_softmax(&logits)
        },
    };
    assert_eq!(greedy_decode(&toy, &[BOS], 10).unwrap(), vec![5]);
    assert_eq!(beam_decode(&toy, &[BOS], 4, 10).unwrap(), vec![5]);
}

#[test]
fn pad_and_bos_are_never_emitted() {
    let toy = Toy {
        vocab: 5,
        table: |prefix: &[TokenId]| {
            let mut logits = vec![0.0; 5];
            logits[PAD as usize] = 50.0;
            logits[BOS as usize] = 40.0;
            logits[4] = if prefix.len() < 3 { 1.0 } else { -5.0 };
            masked_log_softmax(&logits)
        },
    };
    let g = greedy_decode(&toy, &[BOS], 8).unwrap();
    assert!(!g.contains(&PAD) && !g.contains(&BOS));
    let b = beam_decode(&toy, &[BOS], 3, 8).unwrap();
    assert!(!b.contains(&PAD) && !b.contains(&BOS));
    let lp = masked_log_softmax(&[50.0, 40.0, 0.0, 0.0, 1.0]);
    assert_eq!(lp[0], NEG);
    assert!((lp.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn greedy_ties_go_to_lowest_id() {
    let toy = Toy {
        vocab: 6,
        table: |prefix: &[TokenId]| {
            if prefix.is_empty() {
                probs(&[(3, 0.25), (4, 0.25), (5, 0.25), (EOS, 0.25)], 6)
            } else {
                probs(&[(EOS, 1.0)], 6)
            }
        },
    };
    // EOS (id 2) ties and is lowest, so the output is empty
    assert_eq!(greedy_decode(&toy, &[BOS], 5).unwrap(), Vec::<TokenId>::new());
}

/// Two content tokens then a forced EOS; greedy picks A first but the
/// best sequence starts with B.
fn trap() -> Toy<impl Fn(&[TokenId]) -> Vec<f64>> {
    const A: TokenId = 3;
    const B: TokenId = 4;
    Toy {
        vocab: 5,
        table: |prefix: &[TokenId]| match prefix {
            [] => probs(&[(A, 0.55), (B, 0.45)], 5),
            [A] => probs(&[(A, 0.5), (B, 0.5)], 5),
            [B] => probs(&[(A, 0.1), (B, 0.9)], 5),
            [_, _] => probs(&[(EOS, 1.0)], 5),
            _ => probs(&[(EOS, 1.0)], 5),
        },
    }
}

fn enumerate_best<S: Scorer>(s: &S, max_len: usize) -> (Vec<TokenId>, f64) {
    // every sequence of at most max_len tokens, finished by EOS or cut off
    let mut best: Option<(Vec<TokenId>, f64)> = None;
    let mut stack: Vec<Vec<TokenId>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        let lp_prefix = continuation_log_prob(s, &[BOS], &prefix, false).unwrap();
        let lp_next = {
            let (mut st, mut lp) = s.start(&[BOS]).unwrap();
            for &t in &prefix {
                lp = s.advance(&mut st, t).unwrap();
            }
            lp
        };
        for (tok, &l) in lp_next.iter().enumerate() {
            if l == NEG {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(tok as TokenId);
            let total = lp_prefix + l;
            if tok as TokenId == EOS || seq.len() == max_len {
                let score = total / seq.len() as f64;
                if best.as_ref().is_none_or(|(_, b)| score > *b) {
                    best = Some((seq, score));
                }
            } else {
                stack.push(seq);
            }
        }
    }
    best.unwrap()
}

#[test]
fn beam_escapes_greedy_trap() {
    let toy = trap();
    assert_eq!(greedy_decode(&toy, &[BOS], 3).unwrap(), vec![3, 3]);
    let (best, score) = enumerate_best(&toy, 3);
    assert_eq!(best, vec![4, 4, EOS]);
    assert!((score - (0.45f64 * 0.9).ln() / 3.0).abs() < 1e-12);
    let h = beam_search(&toy, &[BOS], 2, 3).unwrap();
    assert_eq!(h.tokens, best);
    assert_eq!(h.output(), &[4, 4]);
    assert!((h.score() - score).abs() < 1e-12);
}

#[test]
fn beam_one_equals_greedy() {
    for seed in 0..5 {
        let p = noisy_params(&tiny_model_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let prompt = random_prompt(&mut rng, p.vocab_size());
            let max_new = 2 * prompt.len() + 4;
            assert_eq!(
                greedy_decode(&p, &prompt, max_new).unwrap(),
                beam_decode(&p, &prompt, 1, max_new).unwrap()
            );
        }
    }
}

#[test]
fn beam_scores_at_least_greedy() {
    for seed in 0..5 {
        let p = noisy_params(&tiny_model_config(), seed + 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10 {
            let prompt = random_prompt(&mut rng, p.vocab_size());
            let max_new = 2 * prompt.len() + 4;
            let g = greedy_decode(&p, &prompt, max_new).unwrap();
            let ended = g.len() < max_new;
            let len = g.len() + usize::from(ended);
            let greedy_score = continuation_log_prob(&p, &prompt, &g, ended).unwrap() / len as f64;
            let h = beam_search(&p, &prompt, 4, max_new).unwrap();
            assert!(h.score() >= greedy_score - 1e-9, "beam {} < greedy {greedy_score}", h.score());
            assert!(h.tokens.len() <= max_new);
        }
    }
}

#[test]
fn contrastive_reduces_to_greedy() {
    let p = noisy_params(&tiny_model_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let prompt = random_prompt(&mut rng, p.vocab_size());
        let other = random_prompt(&mut rng, p.vocab_size());
        let max_new = 2 * prompt.len() + 4;
        let g = greedy_decode(&p, &prompt, max_new).unwrap();
        assert_eq!(contrastive_decode(&p, &prompt, Some(&other), 0.0, max_new).unwrap(), g);
        assert_eq!(contrastive_decode(&p, &prompt, Some(&prompt), 0.5, max_new).unwrap(), g);
        let c = contrastive_decode(&p, &prompt, Some(&other), 0.5, max_new).unwrap();
        assert!(c.len() <= max_new && !c.contains(&PAD) && !c.contains(&BOS));
        assert_eq!(c, contrastive_decode(&p, &prompt, Some(&other), 0.5, max_new).unwrap());
    }
}

#[test]
fn contrastive_penalizes_contrast_language() {
    // main prefers 3 slightly; the contrast prompt prefers 3 strongly
    struct Two;
    impl Scorer for Two {
        type State = (bool, usize);
        fn vocab_size(&self) -> usize {
            5
        }
        fn start(&self, prompt: &[TokenId]) -> Result<((bool, usize), Vec<f64>)> {
            let main = prompt[1] == 9;
            Ok(((main, 0), self.dist(main, 0)))
        }
        fn advance(&self, s: &mut (bool, usize), _t: TokenId) -> Result<Vec<f64>> {
            s.1 += 1;
            Ok(self.dist(s.0, s.1))
        }
    }
    impl Two {
        fn dist(&self, main: bool, depth: usize) -> Vec<f64> {
            match (depth, main) {
                (0, true) => probs(&[(3, 0.5), (4, 0.4), (EOS, 0.1)], 5),
                (0, false) => probs(&[(3, 0.9), (4, 0.05), (EOS, 0.05)], 5),
                _ => probs(&[(EOS, 0.9), (3, 0.05), (4, 0.05)], 5),
            }
        }
    }
    assert_eq!(greedy_decode(&Two, &[BOS, 9], 4).unwrap(), vec![3]);
    assert_eq!(contrastive_decode(&Two, &[BOS, 9], Some(&[BOS, 8]), 0.5, 4).unwrap(), vec![4]);
}

#[test]
fn decoders_respect_max_new_tokens() {
    let toy = Toy {
        vocab: 5,
        table: |_: &[TokenId]| probs(&[(3, 0.9), (EOS, 0.1)], 5),
    };
    assert_eq!(greedy_decode(&toy, &[BOS], 6).unwrap().len(), 6);
    assert!(beam_decode(&toy, &[BOS], 3, 6).unwrap().len() <= 6);
    assert_eq!(contrastive_decode(&toy, &[BOS], Some(&[BOS]), 0.3, 6).unwrap().len(), 6);
}

#[test]
fn decode_config_defaults_and_validation() {
    let c = DecodeConfig::default();
    assert_eq!((c.beam_size, c.lambda_lang, c.k_shot), (4, 0.5, 0));
    assert_eq!(c.max_new_for(7), 18);
    assert!(DecodeConfig { beam_size: 0, ..c.clone() }.validate().is_err());
    assert!(DecodeConfig { lambda_lang: -1.0, ..c }.validate().is_err());
    assert_eq!("beam".parse::<Strategy>().unwrap(), Strategy::Beam);
    assert!("sample".parse::<Strategy>().is_err());
}
