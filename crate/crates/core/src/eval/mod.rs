//! Language identification, off-target ratio, BLEU, token accuracy and
//! evaluation reports.

mod metrics;

pub use metrics::{bleu, detect_language, otr, token_accuracy};

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoding::{beam_decode, contrastive_decode, greedy_decode, ContrastTarget, DecodeConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::{hex, write_atomic, ModelParams};
use crate::synthdata::{format_sample, Corpus, Direction, InstructionSample, Split, TokenId, Vocabulary};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const DECODED_FILE: &str = "decoded.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Supervised,
    ZeroShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionRow {
    pub direction: String,
    pub src: usize,
    pub tgt: usize,
    pub group: Group,
    pub n: usize,
    pub otr: f64,
    pub bleu: f64,
    pub token_accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub directions: usize,
    pub otr: f64,
    pub bleu: f64,
    pub token_accuracy: f64,
}

impl Aggregate {
    /// Unweighted mean over rows.
    pub fn of<'a>(rows: impl IntoIterator<Item = &'a DirectionRow>) -> Self {
        let mut a = Aggregate::default();
        for r in rows {
            a.directions += 1;
            a.otr += r.otr;
            a.bleu += r.bleu;
            a.token_accuracy += r.token_accuracy;
        }
        if a.directions > 0 {
            let n = a.directions as f64;
            a.otr /= n;
            a.bleu /= n;
            a.token_accuracy /= n;
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// SHA-256 of the checkpoint bytes.
    pub checkpoint: String,
    pub decode: DecodeConfig,
    pub decode_hash: String,
    /// For example `greedy, 0-shot, pre-ins`.
    pub label: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<DirectionRow>,
    pub supervised: Aggregate,
    pub zero_shot: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub direction: Direction,
    pub x: Vec<TokenId>,
    pub y_ref: Vec<TokenId>,
    pub y_hyp: Vec<TokenId>,
    pub strategy: Strategy,
    pub config_hash: String,
}

pub fn decode_config_hash(cfg: &DecodeConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("decode config serializes");
    hex(&Sha256::digest(&json))[..16].to_string()
}

pub fn label(cfg: &DecodeConfig) -> String {
    let template = match cfg.template {
        crate::synthdata::Template::PreIns => "pre-ins",
        crate::synthdata::Template::PostIns => "post-ins",
    };
    let mut s = format!("{}, {}-shot, {template}", cfg.strategy, cfg.k_shot);
    match cfg.strategy {
        Strategy::Beam => {
            let _ = write!(s, ", beam {}", cfg.beam_size);
        }
        Strategy::Contrastive => {
            let _ = write!(s, ", lambda {}", cfg.lambda_lang);
        }
        Strategy::Greedy => {}
    }
    s
}

/// Main and (for contrastive decoding) contrast prompts for `pool[index]`.
/// Demonstrations are the next `k` samples of `pool`, cyclically.
pub fn build_prompts(
    pool: &[&InstructionSample],
    index: usize,
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
    max_context: usize,
) -> Result<(Vec<TokenId>, Option<Vec<TokenId>>)> {
    let sample = pool[index];
    if cfg.k_shot >= pool.len() {
        return Err(Error::Config(format!(
            "{}-shot prompting needs more than {} samples in direction {}",
            cfg.k_shot,
            pool.len(),
            sample.direction.label()
        )));
    }
    let demos: Vec<InstructionSample> = (1..=cfg.k_shot)
        .map(|j| pool[(index + j) % pool.len()].clone())
        .collect();
    let main = format_sample(sample, cfg.template, &demos, max_context)?.prompt;
    let contrast = match cfg.strategy {
        Strategy::Contrastive => {
            let tgt = match cfg.contrast {
                ContrastTarget::SourceToSource => sample.direction.src,
                ContrastTarget::SourceTo(l) => l,
            };
            if tgt >= vocab.num_languages {
                return Err(Error::Config(format!("contrast language {tgt} out of range")));
            }
            let dir = Direction::new(sample.direction.src, tgt);
            let twin = InstructionSample {
                direction: dir,
                ins: vocab.instruction(dir),
                ..sample.clone()
            };
            Some(format_sample(&twin, cfg.template, &demos, max_context)?.prompt)
        }
        _ => None,
    };
    Ok((main, contrast))
}

/// Decodes every sample of one direction, in input order.
pub fn decode_direction(
    params: &ModelParams<f32>,
    pool: &[&InstructionSample],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Vec<Vec<TokenId>>> {
    let ctx = params.config().max_context;
    (0..pool.len())
        .into_par_iter()
        .map(|i| {
            let (prompt, contrast) = build_prompts(pool, i, cfg, vocab, ctx)?;
            let room = ctx.saturating_sub(prompt.len().max(contrast.as_ref().map_or(0, Vec::len)));
            let max_new = cfg.max_new_for(pool[i].x.len()).min(room);
            if max_new == 0 {
                return Err(Error::ContextOverflow {
                    len: prompt.len() + 1,
                    limit: ctx,
                });
            }
            match cfg.strategy {
                Strategy::Greedy => greedy_decode(params, &prompt, max_new),
                Strategy::Beam => beam_decode(params, &prompt, cfg.beam_size, max_new),
                Strategy::Contrastive => {
                    contrastive_decode(params, &prompt, contrast.as_deref(), cfg.lambda_lang, max_new)
                }
            }
        })
        .collect()
}

/// Directions of a split in first-appearance order with their samples.
pub fn by_direction(samples: &[InstructionSample]) -> Vec<(Direction, Vec<&InstructionSample>)> {
    let mut out: Vec<(Direction, Vec<&InstructionSample>)> = Vec::new();
    for s in samples {
        match out.iter_mut().find(|(d, _)| *d == s.direction) {
            Some((_, v)) => v.push(s),
            None => out.push((s.direction, vec![s])),
        }
    }
    out
}

pub struct Evaluation {
    pub report: EvalReport,
    pub decoded: Vec<DecodedRecord>,
}

/// Decodes both test splits and assembles the report.
pub fn evaluate(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    cfg: &DecodeConfig,
    checkpoint: &str,
    seed: u64,
) -> Result<Evaluation> {
    evaluate_splits(params, corpus, cfg, checkpoint, seed, &[Split::TestSupervised, Split::TestZeroShot])
}

pub fn evaluate_splits(
    params: &ModelParams<f32>,
    corpus: &Corpus,
    cfg: &DecodeConfig,
    checkpoint: &str,
    seed: u64,
    splits: &[Split],
) -> Result<Evaluation> {
    cfg.validate()?;
    let hash = decode_config_hash(cfg);
    let mut rows = Vec::new();
    let mut decoded = Vec::new();
    for &split in splits {
        let group = match split {
            Split::TestSupervised => Group::Supervised,
            Split::TestZeroShot => Group::ZeroShot,
            Split::Train => return Err(Error::Invalid("evaluation on the training split".into())),
        };
        for (dir, pool) in by_direction(corpus.split(split)) {
            let hyps = decode_direction(params, &pool, cfg, &corpus.vocab)?;
            let refs: Vec<Vec<TokenId>> = pool.iter().map(|s| s.y.clone()).collect();
            rows.push(DirectionRow {
                direction: dir.label(),
                src: dir.src,
                tgt: dir.tgt,
                group,
                n: pool.len(),
                otr: otr(&hyps, dir.tgt, &corpus.vocab)?,
                bleu: bleu(&hyps, &refs, 4)?,
                token_accuracy: token_accuracy(&hyps, &refs)?,
            });
            decoded.extend(pool.iter().zip(hyps).map(|(s, h)| DecodedRecord {
                direction: dir,
                x: s.x.clone(),
                y_ref: s.y.clone(),
                y_hyp: h,
                strategy: cfg.strategy,
                config_hash: hash.clone(),
            }));
        }
    }
    let report = EvalReport {
        meta: ReportMeta {
            checkpoint: checkpoint.to_string(),
            decode: cfg.clone(),
            decode_hash: hash,
            label: label(cfg),
            seed,
        },
        supervised: Aggregate::of(rows.iter().filter(|r| r.group == Group::Supervised)),
        zero_shot: Aggregate::of(rows.iter().filter(|r| r.group == Group::ZeroShot)),
        rows,
    };
    Ok(Evaluation { report, decoded })
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("direction,n,otr,bleu,token_accuracy\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.direction, r.n, r.otr, r.bleu, r.token_accuracy);
    }
    s
}

/// Writes `report.json`, `report.csv` and `decoded.jsonl` into `dir`.
pub fn write_evaluation(ev: &Evaluation, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&ev.report)?;
    write_atomic(&dir.join(REPORT_JSON), format!("{json}\n").as_bytes())?;
    write_atomic(&dir.join(REPORT_CSV), report_csv(&ev.report).as_bytes())?;
    let mut lines = String::new();
    for d in &ev.decoded {
        lines.push_str(&serde_json::to_string(d)?);
        lines.push('\n');
    }
    write_atomic(&dir.join(DECODED_FILE), lines.as_bytes())
}
