//! Whole-model gradient check of the training losses against central
//! differences, on a tiny 64-bit model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{mle_loss_on, ul_loss, UlMode};
use crate::autodiff::{finite_difference_at, relative_error, Graph, NodeId, Tensor};
use crate::error::Result;
use crate::model::{ModelConfig, ModelParams};
use crate::synthdata::{
    conflict_pool, format_sample, make_conflicting, make_corpus, ConflictConfig, ConflictPool, CorpusConfig,
    FormattedSample, Template,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Mle,
    Ul(UlMode),
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Mle, Objective::Ul(UlMode::Sequence), Objective::Ul(UlMode::Token)];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Mle => "mle",
            Objective::Ul(UlMode::Sequence) => "ul-sequence",
            Objective::Ul(UlMode::Token) => "ul-token",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub objective: Objective,
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

pub const FD_EPS: f64 = 1e-5;

fn corpus_config() -> CorpusConfig {
    CorpusConfig {
        num_languages: 3,
        symbols_per_language: 3,
        min_len: 2,
        max_len: 3,
        pairs_per_direction: 4,
        test_pairs_per_direction: 1,
        ..CorpusConfig::default()
    }
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: corpus_config().vocabulary().size(),
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 16,
        max_context: 32,
        seed: 0,
    }
}

/// Seeded init plus N(0, 0.3) noise on every entry, so that attention is
/// not uniform and gradients are not vanishingly small.
pub fn noisy_params(config: &ModelConfig, seed: u64) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::<f64>::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_79);
    let noise = Normal::new(0.0, 0.3).expect("valid std");
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Ok(p)
}

/// Three formatted samples and their conflicting twins.
pub fn batch(seed: u64) -> Result<(Vec<FormattedSample>, Vec<FormattedSample>)> {
    let cfg = corpus_config();
    let corpus = make_corpus(&cfg, seed)?;
    let pool = conflict_pool(&cfg, ConflictPool::SupervisedAndReverses);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = tiny_model_config().max_context;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in corpus.train.iter().take(3) {
        pos.push(format_sample(s, Template::PreIns, &[], ctx)?);
        let c = make_conflicting(s, &pool, ConflictConfig::default(), &corpus.vocab, &mut rng)?;
        neg.push(format_sample(&c.as_instruction(), Template::PreIns, &[], ctx)?);
    }
    Ok((pos, neg))
}

type Built = (Graph<f64>, Vec<NodeId>, NodeId);

fn loss(objective: Objective, params: &ModelParams<f64>, pos: &[FormattedSample], neg: &[FormattedSample]) -> Result<Built> {
    let mut g = Graph::new();
    let nodes = params.attach(&mut g);
    let l = match objective {
        Objective::Mle => mle_loss_on(&mut g, &nodes, pos)?,
        Objective::Ul(mode) => ul_loss(&mut g, &nodes, neg, mode)?,
    };
    Ok((g, nodes.ids().to_vec(), l))
}

/// Compares backward against central differences on `coordinates`
/// uniformly drawn parameter entries.
pub fn check_model_gradient(objective: Objective, seed: u64, coordinates: usize) -> Result<GradCheck> {
    let config = tiny_model_config();
    let params = noisy_params(&config, seed)?;
    let (pos, neg) = batch(seed)?;
    let (g, ids, l) = loss(objective, &params, &pos, &neg)?;
    let grads = g.backward(l)?;

    let total = params.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let sizes: Vec<usize> = params.tensors().iter().map(Tensor::numel).collect();
    let coords: Vec<(usize, usize)> = (0..coordinates)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut i = 0;
            while flat >= sizes[i] {
                flat -= sizes[i];
                i += 1;
            }
            (i, flat)
        })
        .collect();
    let f = |ts: &[Tensor<f64>]| -> Result<f64> {
        let p = ModelParams::from_tensors(&config, ts.to_vec())?;
        let (g, _, l) = loss(objective, &p, &pos, &neg)?;
        Ok(g.value(l).item())
    };
    let numeric = finite_difference_at(f, params.tensors(), &coords, FD_EPS)?;
    let mut worst = 0.0f64;
    for (&(i, j), num) in coords.iter().zip(numeric) {
        let ana = grads.get(ids[i]).map_or(0.0, |t| t.data()[j]);
        worst = worst.max(relative_error(ana, num));
    }
    Ok(GradCheck {
        objective,
        seed,
        coordinates,
        max_rel_err: worst,
    })
}
