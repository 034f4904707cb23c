use super::*;
use crate::model::{load_checkpoint, ModelConfig, ModelParams};
use crate::synthdata::{make_corpus, Corpus, CorpusConfig};

fn small_corpus() -> Corpus {
    let cfg = CorpusConfig {
        num_languages: 3,
        symbols_per_language: 6,
        min_len: 2,
        max_len: 4,
        pairs_per_direction: 40,
        test_pairs_per_direction: 5,
        ..CorpusConfig::default()
    };
    make_corpus(&cfg, 0).unwrap()
}

fn small_model(c: &Corpus) -> ModelConfig {
    ModelConfig {
        vocab_size: c.vocab.size(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 32,
        max_context: 24,
        seed: 0,
    }
}

fn stage1_small() -> TrainConfig {
    TrainConfig {
        base_lr: 3e-3,
        batch_size: 16,
        epochs: 2,
        ..TrainConfig::stage1()
    }
}

#[test]
fn lr_schedule_examples() {
    let base = 2e-4;
    assert_eq!(lr_schedule(0, 1000, 0.03, base).unwrap(), 0.0);
    assert!((lr_schedule(15, 1000, 0.03, base).unwrap() - 0.5 * base).abs() < 1e-18);
    assert_eq!(lr_schedule(30, 1000, 0.03, base).unwrap(), base);
    let expected = base * 485.0 / 970.0;
    assert!((lr_schedule(515, 1000, 0.03, base).unwrap() - expected).abs() < 1e-18);
    assert!((expected - 0.5 * base).abs() < 1e-18);
    assert_eq!(lr_schedule(1000, 1000, 0.03, base).unwrap(), 0.0);
    assert!(lr_schedule(0, 0, 0.03, base).is_err());
    assert!(lr_schedule(1001, 1000, 0.03, base).is_err());
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
    let before = p.clone();
    let mut st = OptimizerState::new(&p);
    st.m[0] = vec![0.1, 0.2, 0.3];
    let g = vec![Tensor::zeros(&[3])];
    adam_step(&mut p, &g, &["w".into()], &mut st, 0.1, AdamConfig::default()).unwrap();
    // moments decay; with non-zero first moment the parameter does move,
    // so check the pure zero-state case separately
    assert!((st.m[0][0] - 0.09).abs() < 1e-15);
    let mut p2 = before.clone();
    let mut st2 = OptimizerState::new(&p2);
    adam_step(&mut p2, &g, &["w".into()], &mut st2, 0.1, AdamConfig::default()).unwrap();
    assert_eq!(p2, before);
    assert_eq!(st2.step, 1);
}

/// Independent scalar recurrence for `f(w) = w^2`.
fn scalar_adam(w0: f64, steps: usize, lr: f64, clip: f64) -> Vec<f64> {
    let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
    let mut out = Vec::new();
    for t in 1..=steps {
        let mut g = 2.0 * w;
        if g.abs() > clip {
            g = g.signum() * clip;
        }
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t as i32));
        let vh = v / (1.0 - 0.999f64.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + 1e-8);
        out.push(w);
    }
    out
}

#[test]
fn adam_minimizes_scalar_quadratic() {
    for clip in [1.0, f64::INFINITY] {
        let cfg = AdamConfig { clip, ..AdamConfig::default() };
        let oracle = scalar_adam(1.0, 100, 0.1, clip);
        let mut p = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap()];
        let mut st = OptimizerState::new(&p);
        for expected in &oracle {
            let g = vec![Tensor::new(vec![1], vec![2.0 * p[0].data()[0]]).unwrap()];
            adam_step(&mut p, &g, &["w".into()], &mut st, 0.1, cfg).unwrap();
            assert!((p[0].data()[0] - expected).abs() < 1e-12);
        }
        assert!(p[0].data()[0].abs() < 0.05);
    }
}

#[test]
fn adam_clips_global_norm() {
    let mut p = vec![Tensor::<f64>::zeros(&[2]), Tensor::zeros(&[1])];
    let g = vec![Tensor::new(vec![2], vec![6.0, 0.0]).unwrap(), Tensor::new(vec![1], vec![8.0]).unwrap()];
    let mut st = OptimizerState::new(&p);
    let norm = adam_step(&mut p, &g, &["a".into(), "b".into()], &mut st, 0.0, AdamConfig::default()).unwrap();
    assert!((norm - 10.0).abs() < 1e-12);
    let eff: f64 = st.m.iter().flatten().map(|m| (m / 0.1).powi(2)).sum::<f64>().sqrt();
    assert!((eff - 1.0).abs() < 1e-6);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut p = vec![Tensor::<f32>::zeros(&[2]), Tensor::zeros(&[2])];
    let g = vec![Tensor::zeros(&[2]), Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap()];
    let mut st = OptimizerState::new(&p);
    match adam_step(&mut p, &g, &["first".into(), "second".into()], &mut st, 0.1, AdamConfig::default()) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("second")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::stage1().validate().is_ok());
    assert!(TrainConfig::stage2().validate().is_ok());
    let mut c = TrainConfig::stage2();
    c.alpha = -0.1;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::stage1();
    c.warmup_ratio = 1.0;
    assert!(c.validate().is_err());
}

#[test]
fn stage1_learns_and_is_deterministic() {
    let corpus = small_corpus();
    let model = small_model(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let a = train_stage1(&stage1_small(), &corpus, &model, Some(dir.path())).unwrap();
    let b = train_stage1(&stage1_small(), &corpus, &model, None).unwrap();
    assert_eq!(a.params, b.params);
    let first = a.log.first().unwrap().mle;
    let last = a.log.last().unwrap().mle;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(a.log.len(), 2 * 160usize.div_ceil(16));
    for (row, step) in a.log.iter().zip(1..) {
        assert_eq!(row.step, step);
        let lr = lr_schedule(step, a.log.len(), 0.03, 3e-3).unwrap();
        assert_eq!(row.lr, lr);
    }
    assert_eq!(load_checkpoint(&dir.path().join(FINAL_CKPT)).unwrap(), a.params);
    let csv = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,lr,mle,ul,total,alpha");
    assert_eq!(csv.lines().count(), a.log.len() + 1);
    assert!(dir.path().join(CONFIG_FILE).exists());
}

#[test]
fn stage2_checkpoints_and_log_invariant() {
    let corpus = small_corpus();
    let model = small_model(&corpus);
    let init = ModelParams::<f32>::init(&model, 1).unwrap();
    let cfg = TrainConfig {
        steps: 30,
        base_lr: 1e-3,
        ..TrainConfig::stage2()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = train_stage2(&cfg, &init, &corpus, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![10, 20, 30]);
    for step in [10, 20, 30] {
        assert!(dir.path().join(checkpoint_name(step)).exists());
    }
    assert_eq!(out.checkpoints.last().unwrap().1, out.params);
    for r in &out.log {
        assert!((r.total - (r.mle + r.alpha * r.ul)).abs() < 1e-6);
        assert!(r.ul >= 0.0 && r.mle >= 0.0);
    }
    let again = train_stage2(&cfg, &init, &corpus, None).unwrap();
    assert_eq!(again.params, out.params);
}

#[test]
fn stage2_alpha_zero_has_no_ul_weight() {
    let corpus = small_corpus();
    let model = small_model(&corpus);
    let init = ModelParams::<f32>::init(&model, 1).unwrap();
    let cfg = TrainConfig {
        steps: 3,
        alpha: 0.0,
        ..TrainConfig::stage2()
    };
    let out = train_stage2(&cfg, &init, &corpus, None).unwrap();
    assert!(out.log.iter().all(|r| r.total == r.mle));
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let corpus = small_corpus();
    let model = small_model(&corpus);
    let cfg = TrainConfig {
        base_lr: 1e38,
        warmup_ratio: 0.0,
        ..stage1_small()
    };
    let dir = tempfile::tempdir().unwrap();
    match train_stage1(&cfg, &corpus, &model, Some(dir.path())) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
    let good = load_checkpoint(&dir.path().join(LAST_GOOD_CKPT)).unwrap();
    assert!(good.is_finite());
}

#[test]
fn stage1_rejects_vocab_mismatch() {
    let corpus = small_corpus();
    let mut model = small_model(&corpus);
    model.vocab_size += 1;
    assert!(matches!(train_stage1(&stage1_small(), &corpus, &model, None), Err(Error::Config(_))));
}
