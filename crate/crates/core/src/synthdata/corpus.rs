use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{translate_oracle, Direction, LanguageSpec, TokenId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_languages: usize,
    pub symbols_per_language: usize,
    pub pivot: usize,
    /// Defaults to every direction touching the pivot.
    pub supervised: Option<Vec<Direction>>,
    /// Defaults to every ordered pair of non-pivot languages.
    pub zero_shot: Option<Vec<Direction>>,
    pub pairs_per_direction: usize,
    pub test_pairs_per_direction: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_languages: 4,
            symbols_per_language: 16,
            pivot: 0,
            supervised: None,
            zero_shot: None,
            pairs_per_direction: 2000,
            test_pairs_per_direction: 200,
            min_len: 3,
            max_len: 12,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.num_languages, self.symbols_per_language)
    }

    pub fn supervised_directions(&self) -> Vec<Direction> {
        self.supervised.clone().unwrap_or_else(|| {
            (0..self.num_languages)
                .filter(|&l| l != self.pivot)
                .flat_map(|l| [Direction::new(self.pivot, l), Direction::new(l, self.pivot)])
                .collect()
        })
    }

    pub fn zero_shot_directions(&self) -> Vec<Direction> {
        self.zero_shot.clone().unwrap_or_else(|| {
            let others: Vec<usize> = (0..self.num_languages).filter(|&l| l != self.pivot).collect();
            others
                .iter()
                .flat_map(|&a| others.iter().filter(move |&&b| b != a).map(move |&b| Direction::new(a, b)))
                .collect()
        })
    }

    /// Fills in the derived direction lists so the config can be persisted
    /// verbatim.
    pub fn resolved(&self) -> Self {
        Self {
            supervised: Some(self.supervised_directions()),
            zero_shot: Some(self.zero_shot_directions()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_languages < 2 {
            return bad("need at least two languages".into());
        }
        if self.symbols_per_language == 0 {
            return bad("symbols_per_language must be positive".into());
        }
        if self.pivot >= self.num_languages {
            return bad(format!("pivot L{} out of range", self.pivot));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("invalid length range {}..={}", self.min_len, self.max_len));
        }
        let sup = self.supervised_directions();
        let zs = self.zero_shot_directions();
        if sup.is_empty() {
            return bad("no supervised directions".into());
        }
        for d in sup.iter().chain(&zs) {
            if d.src >= self.num_languages || d.tgt >= self.num_languages || d.src == d.tgt {
                return bad(format!("invalid direction {}", d.label()));
            }
        }
        if let Some(d) = sup.iter().find(|d| zs.contains(d)) {
            return bad(format!("direction {} is both supervised and zero-shot", d.label()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSupervised,
    TestZeroShot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionSample {
    pub direction: Direction,
    pub ins: Vec<TokenId>,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

/// A training sample whose instruction names a different direction than the
/// one its `(x, y)` pair realizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConflictingSample {
    pub base: InstructionSample,
    pub direction: Direction,
    pub ins: Vec<TokenId>,
}

impl ConflictingSample {
    /// The sample as it is fed to the model: wrong instruction, original x, y.
    pub fn as_instruction(&self) -> InstructionSample {
        InstructionSample {
            direction: self.direction,
            ins: self.ins.clone(),
            x: self.base.x.clone(),
            y: self.base.y.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    pub languages: Vec<LanguageSpec>,
    pub train: Vec<InstructionSample>,
    pub test_supervised: Vec<InstructionSample>,
    pub test_zero_shot: Vec<InstructionSample>,
}

impl Corpus {
    pub fn sample(&self, dir: Direction, concepts: &[usize]) -> Result<InstructionSample> {
        let x = self.languages[dir.src].render(concepts)?;
        let y = translate_oracle(&self.languages[dir.src], &self.languages[dir.tgt], &x)?;
        Ok(InstructionSample {
            direction: dir,
            ins: self.vocab.instruction(dir),
            x,
            y,
        })
    }

    pub fn split(&self, split: Split) -> &[InstructionSample] {
        match split {
            Split::Train => &self.train,
            Split::TestSupervised => &self.test_supervised,
            Split::TestZeroShot => &self.test_zero_shot,
        }
    }
}

/// Number of distinct concept sequences with length in `min..=max`,
/// saturating at `u128::MAX`.
fn concept_space(symbols: usize, min: usize, max: usize) -> u128 {
    (min..=max).fold(0u128, |acc, len| {
        let n = (symbols as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        acc.saturating_add(n)
    })
}

fn draw_distinct(cfg: &CorpusConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let s = cfg.symbols_per_language;
    let space = concept_space(s, cfg.min_len, cfg.max_len);
    if space <= (4 * count as u128).max(1 << 16) {
        // small space: enumerate and shuffle
        let mut all = Vec::new();
        for len in cfg.min_len..=cfg.max_len {
            let total = s.pow(len as u32);
            for mut code in 0..total {
                let mut seq = vec![0; len];
                for slot in seq.iter_mut().rev() {
                    *slot = code % s;
                    code /= s;
                }
                all.push(seq);
            }
        }
        all.shuffle(rng);
        all.truncate(count);
        return all;
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..s)).collect();
        if seen.insert(seq.clone()) {
            out.push(seq);
        }
    }
    out
}

/// Generates train / supervised-test / zero-shot-test splits.
///
/// No concept sequence is shared between any two samples, so in particular
/// train and test never overlap. Deterministic in `seed`.
pub fn make_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let vocab = config.vocabulary();
    let languages = LanguageSpec::default_family(&vocab);
    let sup = config.supervised_directions();
    let zs = config.zero_shot_directions();
    let n_train = sup.len() * config.pairs_per_direction;
    let n_test = (sup.len() + zs.len()) * config.test_pairs_per_direction;
    let needed = (n_train + n_test) as u128;
    let space = concept_space(config.symbols_per_language, config.min_len, config.max_len);
    if needed > space {
        return Err(Error::Config(format!(
            "corpus needs {needed} distinct concept sequences but only {space} exist"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = draw_distinct(config, n_train + n_test, &mut rng);
    let mut pool = pool.into_iter();
    let mut corpus = Corpus {
        config: config.resolved(),
        vocab,
        languages,
        train: Vec::with_capacity(n_train),
        test_supervised: Vec::new(),
        test_zero_shot: Vec::new(),
    };
    let mut fill = |dirs: &[Direction], per: usize, corpus: &Corpus| -> Result<Vec<InstructionSample>> {
        let mut out = Vec::with_capacity(dirs.len() * per);
        for &d in dirs {
            for concepts in pool.by_ref().take(per) {
                out.push(corpus.sample(d, &concepts)?);
            }
        }
        Ok(out)
    };
    corpus.train = fill(&sup, config.pairs_per_direction, &corpus)?;
    corpus.test_supervised = fill(&sup, config.test_pairs_per_direction, &corpus)?;
    corpus.test_zero_shot = fill(&zs, config.test_pairs_per_direction, &corpus)?;
    Ok(corpus)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPool {
    /// Supervised directions and their reverses.
    #[default]
    SupervisedAndReverses,
    /// Every ordered pair of distinct languages.
    AllDirections,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConflictConfig {
    pub pool: ConflictPool,
    /// Replace only the target marker, keeping the source marker.
    pub target_only: bool,
}

/// Directions a conflicting instruction may be drawn from, in a fixed order.
pub fn conflict_pool(corpus: &CorpusConfig, pool: ConflictPool) -> Vec<Direction> {
    let mut out: Vec<Direction> = Vec::new();
    match pool {
        ConflictPool::SupervisedAndReverses => {
            for d in corpus.supervised_directions() {
                for c in [d, d.reversed()] {
                    if !out.contains(&c) {
                        out.push(c);
                    }
                }
            }
        }
        ConflictPool::AllDirections => {
            for s in 0..corpus.num_languages {
                for t in (0..corpus.num_languages).filter(|&t| t != s) {
                    out.push(Direction::new(s, t));
                }
            }
        }
    }
    out
}

/// Replaces the instruction of `sample` with one naming a different
/// direction, drawn uniformly. `x` and `y` are kept verbatim.
pub fn make_conflicting<R: Rng + ?Sized>(
    sample: &InstructionSample,
    pool: &[Direction],
    config: ConflictConfig,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<ConflictingSample> {
    let candidates: Vec<Direction> = if config.target_only {
        (0..vocab.num_languages)
            .filter(|&t| t != sample.direction.tgt)
            .map(|t| Direction::new(sample.direction.src, t))
            .collect()
    } else {
        pool.iter().copied().filter(|&d| d != sample.direction).collect()
    };
    if candidates.is_empty() {
        return Err(Error::Config(format!(
            "no conflicting direction available for {}",
            sample.direction.label()
        )));
    }
    let direction = candidates[rng.random_range(0..candidates.len())];
    Ok(ConflictingSample {
        base: sample.clone(),
        direction,
        ins: vocab.instruction(direction),
    })
}
