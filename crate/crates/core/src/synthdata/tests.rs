use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn family() -> (Vocabulary, Vec<LanguageSpec>) {
    let v = Vocabulary::new(4, 16);
    let langs = LanguageSpec::default_family(&v);
    (v, langs)
}

fn small_config() -> CorpusConfig {
    CorpusConfig {
        pairs_per_direction: 50,
        test_pairs_per_direction: 10,
        ..CorpusConfig::default()
    }
}

#[test]
fn vocabulary_layout() {
    let v = Vocabulary::new(4, 16);
    assert_eq!(v.size(), 77);
    assert_eq!((v.from_marker(0), v.from_marker(3)), (5, 8));
    assert_eq!((v.to_marker(0), v.to_marker(3)), (9, 12));
    assert_eq!(v.content_range(0), (13, 29));
    assert_eq!(v.content_range(3), (61, 77));
    assert_eq!(v.language_of(12), None);
    assert_eq!(v.language_of(13), Some(0));
    assert_eq!(v.language_of(45), Some(2));
    assert_eq!(v.language_of(76), Some(3));
    assert_eq!(v.language_of(77), None);
    for t in 13..77 {
        assert!(v.language_of(t).is_some());
    }
}

#[test]
fn render_examples() {
    let (_, l) = family();
    assert_eq!(l[0].render(&[0, 1, 2]).unwrap(), vec![13, 14, 15]);
    assert_eq!(l[2].render(&[0, 1, 2]).unwrap(), vec![47, 46, 45]);
    assert_eq!(l[3].render(&[0, 11]).unwrap(), vec![61 + 5, 61]);
    assert!(l[0].render(&[16]).is_err());
}

#[test]
fn render_invert_roundtrip() {
    let (_, l) = family();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let lang = &l[rng.random_range(0..4)];
        let len = rng.random_range(1..13);
        let c: Vec<usize> = (0..len).map(|_| rng.random_range(0..16)).collect();
        assert_eq!(lang.invert(&lang.render(&c).unwrap()).unwrap(), c);
    }
}

#[test]
fn oracle_examples() {
    let (_, l) = family();
    assert_eq!(translate_oracle(&l[0], &l[1], &[13, 14, 15]).unwrap(), vec![29, 30, 31]);
    assert_eq!(translate_oracle(&l[0], &l[0], &[20, 13, 28]).unwrap(), vec![20, 13, 28]);
    assert!(translate_oracle(&l[0], &l[1], &[29]).is_err());
}

#[test]
fn oracle_composes() {
    let (_, l) = family();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let len = rng.random_range(1..13);
        let s: Vec<TokenId> = (0..len).map(|_| rng.random_range(13..29)).collect();
        let via = translate_oracle(&l[1], &l[2], &translate_oracle(&l[0], &l[1], &s).unwrap()).unwrap();
        assert_eq!(via, translate_oracle(&l[0], &l[2], &s).unwrap());
    }
}

#[test]
fn permutation_must_be_bijective() {
    assert!(LanguageSpec::new(0, 13, vec![0, 0, 1], WordOrder::Forward).is_err());
    assert!(LanguageSpec::new(0, 13, vec![2, 0, 1], WordOrder::Forward).is_ok());
}

#[test]
fn default_corpus_sizes_and_splits() {
    let c = make_corpus(&CorpusConfig::default(), 0).unwrap();
    assert_eq!(c.train.len(), 12000);
    assert_eq!(c.test_supervised.len(), 1200);
    assert_eq!(c.test_zero_shot.len(), 1200);
    let mut per_dir: HashMap<Direction, usize> = HashMap::new();
    for s in &c.train {
        assert!(s.direction.src == 0 || s.direction.tgt == 0);
        *per_dir.entry(s.direction).or_default() += 1;
    }
    assert_eq!(per_dir.len(), 6);
    assert!(per_dir.values().all(|&n| n == 2000));
    for s in &c.test_zero_shot {
        assert!(s.direction.src != 0 && s.direction.tgt != 0);
    }
    // concepts never shared between train and test
    let key = |s: &InstructionSample| c.languages[s.direction.src].invert(&s.x).unwrap();
    let train: HashSet<Vec<usize>> = c.train.iter().map(key).collect();
    assert!(c.test_supervised.iter().chain(&c.test_zero_shot).all(|s| !train.contains(&key(s))));
    // every pair agrees with the oracle and lies in the target range
    for s in c.train.iter().chain(&c.test_supervised).chain(&c.test_zero_shot) {
        let (src, tgt) = (&c.languages[s.direction.src], &c.languages[s.direction.tgt]);
        assert_eq!(translate_oracle(src, tgt, &s.x).unwrap(), s.y);
        assert!(s.y.iter().all(|&t| c.vocab.language_of(t) == Some(tgt.id)));
        assert!((3..=12).contains(&s.x.len()));
    }
}

#[test]
fn corpus_is_reproducible() {
    let cfg = small_config();
    assert_eq!(make_corpus(&cfg, 9).unwrap(), make_corpus(&cfg, 9).unwrap());
    assert_ne!(make_corpus(&cfg, 9).unwrap().train, make_corpus(&cfg, 10).unwrap().train);
}

#[test]
fn corpus_rejects_impossible_demand_and_overlap() {
    let cfg = CorpusConfig {
        symbols_per_language: 2,
        min_len: 1,
        max_len: 2,
        ..small_config()
    };
    assert!(matches!(make_corpus(&cfg, 0), Err(crate::Error::Config(_))));

    let cfg = CorpusConfig {
        zero_shot: Some(vec![Direction::new(0, 1)]),
        ..small_config()
    };
    assert!(matches!(make_corpus(&cfg, 0), Err(crate::Error::Config(_))));
}

#[test]
fn tiny_space_is_enumerated() {
    let cfg = CorpusConfig {
        symbols_per_language: 3,
        min_len: 2,
        max_len: 3,
        pairs_per_direction: 4,
        test_pairs_per_direction: 1,
        ..CorpusConfig::default()
    };
    // 9 + 27 = 36 sequences, 24 + 12 needed: exactly the whole space
    let c = make_corpus(&cfg, 3).unwrap();
    let all: HashSet<Vec<TokenId>> = c
        .train
        .iter()
        .chain(&c.test_supervised)
        .chain(&c.test_zero_shot)
        .map(|s| c.languages[s.direction.src].invert(&s.x).unwrap().iter().map(|&v| v as TokenId).collect())
        .collect();
    assert_eq!(all.len(), 36);
}

#[test]
fn format_examples() {
    let v = Vocabulary::new(4, 16);
    let s = InstructionSample {
        direction: Direction::new(0, 1),
        ins: v.instruction(Direction::new(0, 1)),
        x: vec![13],
        y: vec![29],
    };
    let pre = format_sample(&s, Template::PreIns, &[], 64).unwrap();
    assert_eq!(pre.prompt, vec![1, 4, 5, 10, 3, 13, 3]);
    assert_eq!(pre.target, vec![29, 2]);
    assert_eq!(pre.loss_mask, vec![false, false, false, false, false, false, false, true, true]);
    let post = format_sample(&s, Template::PostIns, &[], 64).unwrap();
    assert_eq!(post.prompt, vec![1, 13, 3, 4, 5, 10, 3]);

    let with_demo = format_sample(&s, Template::PreIns, std::slice::from_ref(&s), 64).unwrap();
    assert_eq!(with_demo.prompt, vec![1, 4, 5, 10, 3, 13, 3, 29, 2, 4, 5, 10, 3, 13, 3]);
    assert_eq!(with_demo.loss_mask.iter().filter(|&&m| m).count(), 2);

    match format_sample(&s, Template::PreIns, &[], 8) {
        Err(crate::Error::ContextOverflow { len: 9, limit: 8 }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn conflicting_excludes_original_and_is_deterministic() {
    let c = make_corpus(&small_config(), 0).unwrap();
    let pool = conflict_pool(&c.config, ConflictPool::SupervisedAndReverses);
    assert_eq!(pool.len(), 6);
    let s = &c.train[0];
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cs = make_conflicting(s, &pool, ConflictConfig::default(), &c.vocab, &mut rng).unwrap();
        assert_ne!(cs.direction, s.direction);
        assert!(pool.contains(&cs.direction));
        assert_eq!((&cs.base.x, &cs.base.y), (&s.x, &s.y));
        assert_eq!(cs.ins, c.vocab.instruction(cs.direction));
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(cs, make_conflicting(s, &pool, ConflictConfig::default(), &c.vocab, &mut rng2).unwrap());
    }
}

#[test]
fn conflicting_target_only_and_all_directions() {
    let c = make_corpus(&small_config(), 0).unwrap();
    let all = conflict_pool(&c.config, ConflictPool::AllDirections);
    assert_eq!(all.len(), 12);
    let s = &c.train[0];
    let cfg = ConflictConfig {
        pool: ConflictPool::AllDirections,
        target_only: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let cs = make_conflicting(s, &all, cfg, &c.vocab, &mut rng).unwrap();
        assert_eq!(cs.direction.src, s.direction.src);
        assert_ne!(cs.direction.tgt, s.direction.tgt);
    }
}

/// Each admissible replacement should appear with frequency 1/5 over 10000
/// draws; the bound is three binomial standard deviations.
#[test]
fn conflicting_draw_is_uniform() {
    let c = make_corpus(&small_config(), 0).unwrap();
    let pool = conflict_pool(&c.config, ConflictPool::SupervisedAndReverses);
    let s = &c.train[0];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts: HashMap<Direction, usize> = HashMap::new();
    let n = 10_000;
    for _ in 0..n {
        let cs = make_conflicting(s, &pool, ConflictConfig::default(), &c.vocab, &mut rng).unwrap();
        *counts.entry(cs.direction).or_default() += 1;
    }
    assert_eq!(counts.len(), 5);
    let p = 0.2;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (&d, &k) in &counts {
        assert!((k as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{d:?}: {k}");
    }
}

#[test]
fn corpus_dir_roundtrip() {
    let c = make_corpus(&small_config(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus_dir(&c, dir.path()).unwrap();
    let back = read_corpus_dir(dir.path()).unwrap();
    assert_eq!(back, c);
    let manifest: VocabManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("vocab.json")).unwrap()).unwrap();
    assert_eq!(manifest.vocab_size, 77);
    assert_eq!(manifest.languages[2].range, [45, 61]);
    let line = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["direction", "ins", "x", "y", "split"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["split"], "train");
}

proptest! {
    #[test]
    fn oracle_output_stays_in_target_range(
        concepts in proptest::collection::vec(0usize..16, 1..12),
        src in 0usize..4,
        tgt in 0usize..4,
    ) {
        let (v, l) = family();
        let x = l[src].render(&concepts).unwrap();
        let y = translate_oracle(&l[src], &l[tgt], &x).unwrap();
        prop_assert_eq!(y.len(), x.len());
        prop_assert!(y.iter().all(|&t| v.language_of(t) == Some(tgt)));
    }
}
