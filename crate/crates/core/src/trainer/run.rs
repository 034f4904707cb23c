use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{adam_step, lr_schedule, OptimizerState, TrainConfig};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, write_atomic, ModelConfig, ModelParams, ParamNodes};
use crate::objectives::{mixed_loss, mixed_loss_graph, mle_loss_on};
use crate::synthdata::{conflict_pool, format_sample, make_conflicting, Corpus, FormattedSample, InstructionSample};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CKPT: &str = "final.bin";
pub const LAST_GOOD_CKPT: &str = "last_good.bin";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub mle: f64,
    pub ul: f64,
    pub total: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<LogRow>,
    /// Stage-2 intermediate models, keyed by step.
    pub checkpoints: Vec<(usize, ModelParams<f32>)>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_step{step:04}.bin")
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,lr,mle,ul,total,alpha\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{},{},{},{}", r.step, r.lr, r.mle, r.ul, r.total, r.alpha);
    }
    s
}

#[derive(Serialize)]
struct RunConfig<'a> {
    train: &'a TrainConfig,
    model: &'a ModelConfig,
}

struct RunDir<'a> {
    dir: Option<&'a Path>,
}

impl RunDir<'_> {
    fn start(&self, cfg: &TrainConfig, model: &ModelConfig) -> Result<()> {
        if let Some(d) = self.dir {
            std::fs::create_dir_all(d)?;
            let json = serde_json::to_string_pretty(&RunConfig { train: cfg, model })?;
            write_atomic(&d.join(CONFIG_FILE), format!("{json}\n").as_bytes())?;
        }
        Ok(())
    }

    fn log(&self, rows: &[LogRow]) -> Result<()> {
        match self.dir {
            Some(d) => write_atomic(&d.join(LOG_FILE), log_csv(rows).as_bytes()),
            None => Ok(()),
        }
    }

    fn save(&self, name: &str, params: &ModelParams<f32>) -> Result<()> {
        match self.dir {
            Some(d) => save_checkpoint(params, &d.join(name)),
            None => Ok(()),
        }
    }
}

/// One optimizer update on `loss`; a non-finite loss or gradient leaves
/// the parameters untouched and reports divergence.
fn update(
    params: &mut ModelParams<f32>,
    state: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
    build: impl FnOnce(&mut Graph<f32>, &ParamNodes) -> Result<(NodeId, NodeId, NodeId)>,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let nodes = params.attach(&mut g);
    let (total, mle, ul) = build(&mut g, &nodes)?;
    let vals = (g.value(total).item() as f64, g.value(mle).item() as f64, g.value(ul).item() as f64);
    if !(vals.0.is_finite() && vals.1.is_finite() && vals.2.is_finite()) {
        return Err(Error::Diverged {
            step,
            what: format!("loss {:?}", vals),
        });
    }
    let mut grads = g.backward(total)?;
    let grads: Vec<Tensor<f32>> = nodes
        .ids()
        .iter()
        .map(|id| grads.take(*id).expect("every parameter has a gradient"))
        .collect();
    let names = params.names();
    let mut trial = params.clone();
    let mut trial_state = state.clone();
    adam_step(trial.tensors_mut(), &grads, &names, &mut trial_state, lr, cfg.adam()).map_err(|e| Error::Diverged {
        step,
        what: e.to_string(),
    })?;
    if !trial.is_finite() {
        return Err(Error::Diverged {
            step,
            what: "parameters became non-finite".into(),
        });
    }
    *params = trial;
    *state = trial_state;
    Ok(vals)
}

fn format_all(samples: &[&InstructionSample], cfg: &TrainConfig, ctx: usize) -> Result<Vec<FormattedSample>> {
    samples.iter().map(|s| format_sample(s, cfg.template, &[], ctx)).collect()
}

fn check_vocab(corpus: &Corpus, model: &ModelConfig) -> Result<()> {
    if corpus.vocab.size() != model.vocab_size {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match corpus vocabulary {}",
            model.vocab_size,
            corpus.vocab.size()
        )));
    }
    Ok(())
}

fn on_divergence(run: &RunDir, last_good: &ModelParams<f32>, rows: &[LogRow], err: Error) -> Error {
    if let Error::Diverged { .. } = err {
        let _ = run.save(LAST_GOOD_CKPT, last_good);
        let _ = run.log(rows);
    }
    err
}

/// Likelihood training from a fresh model over shuffled batches of the
/// training split.
pub fn train_stage1(cfg: &TrainConfig, corpus: &Corpus, model: &ModelConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config("train_stage1 needs a stage-1 config".into()));
    }
    check_vocab(corpus, model)?;
    let supervised = corpus.config.supervised_directions();
    if let Some(s) = corpus.train.iter().find(|s| !supervised.contains(&s.direction)) {
        return Err(Error::Config(format!("training data contains unsupervised direction {}", s.direction.label())));
    }
    if corpus.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let run = RunDir { dir: out };
    run.start(cfg, model)?;

    let mut params = ModelParams::<f32>::init(model, model.seed)?;
    let mut state = OptimizerState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = corpus.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rows = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = lr_schedule(step, total, cfg.warmup_ratio, cfg.base_lr)?;
            let batch: Vec<&InstructionSample> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let formatted = format_all(&batch, cfg, model.max_context)?;
            let res = update(&mut params, &mut state, cfg, lr, step, |g, nodes| {
                let l = mle_loss_on(g, nodes, &formatted)?;
                let zero = g.constant(Tensor::scalar(0.0));
                Ok((l, l, zero))
            });
            let (total_loss, mle, ul) = res.map_err(|e| on_divergence(&run, &params, &rows, e))?;
            rows.push(LogRow {
                step,
                lr,
                mle,
                ul,
                total: total_loss,
                alpha: 0.0,
            });
        }
    }
    run.log(&rows)?;
    run.save(super::FINAL_CKPT, &params)?;
    Ok(TrainOutcome {
        params,
        log: rows,
        checkpoints: Vec::new(),
    })
}

/// Continues from `init` with `mle + alpha * ul`, where each batch of
/// training samples is paired with one conflicting twin per sample.
pub fn train_stage2(
    cfg: &TrainConfig,
    init: &ModelParams<f32>,
    corpus: &Corpus,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config("train_stage2 needs a stage-2 config".into()));
    }
    let model = init.config().clone();
    check_vocab(corpus, &model)?;
    if corpus.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let run = RunDir { dir: out };
    run.start(cfg, &model)?;

    let pool = conflict_pool(&corpus.config, cfg.conflict.pool);
    let mut params = init.clone();
    let mut state = OptimizerState::new(params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    for step in 1..=cfg.steps {
        let lr = lr_schedule(step, cfg.steps, cfg.warmup_ratio, cfg.base_lr)?;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus.train[order[cursor]]);
            cursor += 1;
        }
        let twins = batch
            .iter()
            .map(|s| make_conflicting(s, &pool, cfg.conflict, &corpus.vocab, &mut rng).map(|c| c.as_instruction()))
            .collect::<Result<Vec<_>>>()?;
        let pos = format_all(&batch, cfg, model.max_context)?;
        let neg = format_all(&twins.iter().collect::<Vec<_>>(), cfg, model.max_context)?;
        let res = update(&mut params, &mut state, cfg, lr, step, |g, nodes| {
            mixed_loss_graph(g, nodes, &pos, &neg, cfg.alpha, cfg.ul_mode)
        });
        let (_, mle, ul) = res.map_err(|e| on_divergence(&run, &params, &rows, e))?;
        let b = mixed_loss(mle, ul, cfg.alpha)?;
        rows.push(LogRow {
            step,
            lr,
            mle: b.mle,
            ul: b.ul,
            total: b.total,
            alpha: cfg.alpha,
        });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            run.save(&checkpoint_name(step), &params)?;
            checkpoints.push((step, params.clone()));
        }
    }
    run.log(&rows)?;
    run.save(super::FINAL_CKPT, &params)?;
    Ok(TrainOutcome {
        params,
        log: rows,
        checkpoints,
    })
}
