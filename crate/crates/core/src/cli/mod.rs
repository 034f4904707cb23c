//! Command-line front end: dataset generation, training, evaluation,
//! ablations and the end-to-end reproduction run.

mod config;

pub use config::{merge_json, ExperimentConfig};

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::decoding::{DecodeConfig, Strategy};
use crate::error::Error;
use crate::eval::{evaluate, write_evaluation, EvalReport};
use crate::model::{decode_checkpoint, encode_checkpoint, hex, write_atomic, ModelParams};
use crate::synthdata::{make_corpus, read_corpus_dir, write_corpus_dir, Corpus, Template};
use crate::trainer::{train_stage1, train_stage2, TrainOutcome, FINAL_CKPT};

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const LOCK_FILE: &str = ".lock";
pub const THREADS_ENV: &str = "OFFTARGET_THREADS";
pub const ALPHA_GRID: [f64; 7] = [0.0, 0.01, 0.02, 0.04, 0.05, 0.1, 0.3];

#[derive(Debug, Parser)]
#[command(name = "offtarget", version, about = "Off-target zero-shot translation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run stage 1 (likelihood) or stage 2 (likelihood plus unlikelihood).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint to continue from (stage 2 only).
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode both test splits and write reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        template: Option<Template>,
        #[arg(long)]
        beam_size: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep alpha or evaluate every stage-2 checkpoint.
    Ablate {
        #[arg(long, value_enum)]
        what: Ablation,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Data, both stages, every evaluation and both ablations in one run.
    Repro {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Alpha,
    Steps,
}

/// Exit code 2 for usage and configuration problems, 1 for everything else.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("invalid configuration: {m}")),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    init_threads()?;
    match command {
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let _lock = RunLock::acquire(&out)?;
            let corpus = gen_data(&cfg, &out)?;
            println!(
                "train {} test_supervised {} test_zeroshot {}",
                corpus.train.len(),
                corpus.test_supervised.len(),
                corpus.test_zero_shot.len()
            );
            Ok(())
        }
        Command::Train {
            stage,
            config,
            data,
            from,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let init = match (stage, from) {
                (2, None) => return Err(Failure::Usage("stage 2 requires --from <checkpoint>".into())),
                (2, Some(p)) => Some(load_params(&p)?),
                (_, Some(_)) => return Err(Failure::Usage("--from only applies to stage 2".into())),
                (_, None) => None,
            };
            let corpus = load_data(&data)?;
            let _lock = RunLock::acquire(&out)?;
            write_atomic(&out.join(EXPERIMENT_FILE), cfg.to_json().as_bytes())?;
            let outcome = match init {
                None => train_stage1(&cfg.stage1, &corpus, &cfg.model, Some(&out))?,
                Some(p) => train_stage2(&cfg.stage2, &p, &corpus, Some(&out))?,
            };
            let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
            println!("stage {stage}: {} steps, final loss {last:.4}, wrote {}", outcome.log.len(), out.join(FINAL_CKPT).display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            data,
            config,
            strategy,
            k,
            template,
            beam_size,
            lambda,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let mut decode = cfg.decode.clone();
            if let Some(s) = strategy {
                decode.strategy = s;
            }
            if let Some(k) = k {
                decode.k_shot = k;
            }
            if let Some(t) = template {
                decode.template = t;
            }
            if let Some(b) = beam_size {
                decode.beam_size = b;
            }
            if let Some(l) = lambda {
                decode.lambda_lang = l;
            }
            decode.validate()?;
            let params = load_params(&ckpt)?;
            let corpus = load_data(&data)?;
            let _lock = RunLock::acquire(&out)?;
            let report = eval_into(&params, &corpus, &decode, cfg.seed, &out)?;
            print_summary(&report);
            Ok(())
        }
        Command::Ablate {
            what,
            config,
            data,
            from,
            out,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref())?;
            let init = load_params(&from)?;
            let corpus = load_data(&data)?;
            let _lock = RunLock::acquire(&out)?;
            write_atomic(&out.join(EXPERIMENT_FILE), cfg.to_json().as_bytes())?;
            let rows = match what {
                Ablation::Alpha => ablate_alpha(&cfg, &init, &corpus, &out)?,
                Ablation::Steps => {
                    let run = train_stage2(&cfg.stage2, &init, &corpus, Some(&out.join("stage2")))?;
                    ablate_steps(&cfg, &run, &corpus, &out)?
                }
            };
            print!("{}", ablation_csv(&rows));
            Ok(())
        }
        Command::Repro { config, out } => {
            let mut cfg = ExperimentConfig::load(config.as_deref())?;
            if let Some(o) = out {
                cfg.out = o;
            }
            let dir = cfg.out.clone();
            let _lock = RunLock::acquire(&dir)?;
            let summary = repro(&cfg, &dir)?;
            for (name, r) in &summary.evaluations {
                println!(
                    "{name:<22} sup otr {:.3} bleu {:6.2} | zero-shot otr {:.3} bleu {:6.2}",
                    r.supervised.otr, r.supervised.bleu, r.zero_shot.otr, r.zero_shot.bleu
                );
            }
            println!("wrote {}", dir.join(crate::eval::REPORT_JSON).display());
            Ok(())
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Exclusive ownership of a run directory for the life of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Runtime(anyhow::anyhow!(
                "{} is in use by another process (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::Runtime(anyhow::Error::new(e).context(format!("locking {}", dir.display())))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn load_params(path: &Path) -> CliResult<ModelParams<f32>> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())))
        }
        Err(e) => return Err(Failure::Runtime(anyhow::Error::new(e).context(format!("reading {}", path.display())))),
    };
    Ok(decode_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))?)
}

fn load_data(dir: &Path) -> CliResult<Corpus> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!("data directory {} does not exist", dir.display())));
    }
    Ok(read_corpus_dir(dir).with_context(|| format!("reading dataset {}", dir.display()))?)
}

/// SHA-256 of the checkpoint encoding, so in-memory models get the same
/// identifier their saved file would.
pub fn params_digest(params: &ModelParams<f32>) -> CliResult<String> {
    Ok(hex(&Sha256::digest(encode_checkpoint(params)?)))
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<Corpus> {
    let corpus = make_corpus(&cfg.corpus, cfg.corpus.seed)?;
    write_corpus_dir(&corpus, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    write_atomic(&out.join(EXPERIMENT_FILE), cfg.to_json().as_bytes())?;
    Ok(corpus)
}

fn eval_into(params: &ModelParams<f32>, corpus: &Corpus, decode: &DecodeConfig, seed: u64, out: &Path) -> CliResult<EvalReport> {
    let ev = evaluate(params, corpus, decode, &params_digest(params)?, seed)?;
    write_evaluation(&ev, out).with_context(|| format!("writing evaluation to {}", out.display()))?;
    Ok(ev.report)
}

fn print_summary(r: &EvalReport) {
    println!("{}", r.meta.label);
    for row in &r.rows {
        println!("{:<8} otr {:.3} bleu {:6.2} acc {:.3}", row.direction, row.otr, row.bleu, row.token_accuracy);
    }
    println!(
        "supervised otr {:.3} bleu {:.2} | zero-shot otr {:.3} bleu {:.2}",
        r.supervised.otr, r.supervised.bleu, r.zero_shot.otr, r.zero_shot.bleu
    );
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub x: f64,
    pub zero_shot_otr: f64,
    pub zero_shot_bleu: f64,
    pub supervised_bleu: f64,
}

impl AblationRow {
    fn of(x: f64, r: &EvalReport) -> Self {
        Self {
            x,
            zero_shot_otr: r.zero_shot.otr,
            zero_shot_bleu: r.zero_shot.bleu,
            supervised_bleu: r.supervised.bleu,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("x,zero_shot_otr,zero_shot_bleu,supervised_bleu\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.x, r.zero_shot_otr, r.zero_shot_bleu, r.supervised_bleu);
    }
    s
}

/// One stage-2 run per grid value, each evaluated on its final model.
pub fn ablate_alpha(cfg: &ExperimentConfig, init: &ModelParams<f32>, corpus: &Corpus, out: &Path) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for alpha in ALPHA_GRID {
        let c2 = crate::trainer::TrainConfig {
            alpha,
            checkpoint_every: 0,
            ..cfg.stage2.clone()
        };
        let run = train_stage2(&c2, init, corpus, None)?;
        let report = eval_into(&run.params, corpus, &cfg.decode, cfg.seed, &out.join(format!("alpha_{alpha}")))?;
        rows.push(AblationRow::of(alpha, &report));
    }
    write_atomic(&out.join(ABLATION_CSV), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Evaluates every intermediate checkpoint of one stage-2 run.
pub fn ablate_steps(cfg: &ExperimentConfig, run: &TrainOutcome, corpus: &Corpus, out: &Path) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (step, params) in &run.checkpoints {
        let report = eval_into(params, corpus, &cfg.decode, cfg.seed, &out.join(format!("step_{step:04}")))?;
        rows.push(AblationRow::of(*step as f64, &report));
    }
    write_atomic(&out.join(ABLATION_CSV), ablation_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// `report.json` of a reproduction run.
#[derive(Clone, Debug, Serialize)]
pub struct ReproSummary {
    pub config: ExperimentConfig,
    pub stage1_final_loss: f64,
    pub stage2_final_loss: f64,
    /// Evaluation name and its report, in a fixed order.
    pub evaluations: Vec<(String, EvalReport)>,
    pub ablation_alpha: Vec<AblationRow>,
    pub ablation_steps: Vec<AblationRow>,
}

impl ReproSummary {
    pub fn get(&self, name: &str) -> Option<&EvalReport> {
        self.evaluations.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Decoding setups evaluated on the stage-1 model in a reproduction run.
pub fn baseline_decodes(base: &DecodeConfig) -> Vec<(&'static str, DecodeConfig)> {
    let with = |f: &dyn Fn(&mut DecodeConfig)| {
        let mut d = base.clone();
        f(&mut d);
        d
    };
    vec![
        ("greedy", with(&|d| d.strategy = Strategy::Greedy)),
        ("beam", with(&|d| d.strategy = Strategy::Beam)),
        ("contrastive", with(&|d| d.strategy = Strategy::Contrastive)),
        ("post-ins", with(&|d| d.template = Template::PostIns)),
        ("1-shot", with(&|d| d.k_shot = 1)),
        ("5-shot", with(&|d| d.k_shot = 5)),
    ]
}

pub fn repro(cfg: &ExperimentConfig, dir: &Path) -> CliResult<ReproSummary> {
    write_atomic(&dir.join(EXPERIMENT_FILE), cfg.to_json().as_bytes())?;
    let corpus = gen_data(cfg, &dir.join("data"))?;
    let s1 = train_stage1(&cfg.stage1, &corpus, &cfg.model, Some(&dir.join("stage1")))?;
    let s2 = train_stage2(&cfg.stage2, &s1.params, &corpus, Some(&dir.join("stage2")))?;
    let mut evaluations = Vec::new();
    for (name, decode) in baseline_decodes(&cfg.decode) {
        let key = format!("stage1/{name}");
        let r = eval_into(&s1.params, &corpus, &decode, cfg.seed, &dir.join("eval").join(&key))?;
        evaluations.push((key, r));
    }
    for (name, decode) in baseline_decodes(&cfg.decode).into_iter().take(2) {
        let key = format!("stage2/{name}");
        let r = eval_into(&s2.params, &corpus, &decode, cfg.seed, &dir.join("eval").join(&key))?;
        evaluations.push((key, r));
    }
    let ablation_alpha = ablate_alpha(cfg, &s1.params, &corpus, &dir.join("ablate_alpha"))?;
    let ablation_steps = ablate_steps(cfg, &s2, &corpus, &dir.join("ablate_steps"))?;
    let summary = ReproSummary {
        config: cfg.clone(),
        stage1_final_loss: s1.log.last().map_or(f64::NAN, |r| r.total),
        stage2_final_loss: s2.log.last().map_or(f64::NAN, |r| r.total),
        evaluations,
        ablation_alpha,
        ablation_steps,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
    write_atomic(&dir.join(crate::eval::REPORT_JSON), format!("{json}\n").as_bytes())?;
    Ok(summary)
}
