use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    translate_oracle, Corpus, CorpusConfig, Direction, InstructionSample, LanguageSpec, Split, TokenId, Vocabulary,
    BOS, EOS, PAD, SEP, TRANSLATE,
};
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_SUPERVISED_FILE: &str = "test_supervised.jsonl";
pub const TEST_ZERO_SHOT_FILE: &str = "test_zeroshot.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub direction: Direction,
    pub ins: Vec<TokenId>,
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub split: Split,
}

impl SampleRecord {
    pub fn new(s: &InstructionSample, split: Split) -> Self {
        Self {
            direction: s.direction,
            ins: s.ins.clone(),
            x: s.x.clone(),
            y: s.y.clone(),
            split,
        }
    }

    pub fn into_sample(self) -> InstructionSample {
        InstructionSample {
            direction: self.direction,
            ins: self.ins,
            x: self.x,
            y: self.y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep: TokenId,
    pub translate: TokenId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEntry {
    #[serde(flatten)]
    pub spec: LanguageSpec,
    pub from_marker: TokenId,
    pub to_marker: TokenId,
    /// Half-open content-token range.
    pub range: [TokenId; 2],
}

/// `vocab.json`: token layout, language definitions and the corpus config
/// that produced the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub vocab_size: usize,
    pub num_languages: usize,
    pub symbols_per_language: usize,
    pub specials: SpecialTokens,
    pub languages: Vec<LanguageEntry>,
    pub corpus: CorpusConfig,
}

impl VocabManifest {
    pub fn new(corpus: &Corpus) -> Self {
        let v = corpus.vocab;
        Self {
            vocab_size: v.size(),
            num_languages: v.num_languages,
            symbols_per_language: v.symbols,
            specials: SpecialTokens {
                pad: PAD,
                bos: BOS,
                eos: EOS,
                sep: SEP,
                translate: TRANSLATE,
            },
            languages: corpus
                .languages
                .iter()
                .map(|l| {
                    let (lo, hi) = v.content_range(l.id);
                    LanguageEntry {
                        spec: l.clone(),
                        from_marker: v.from_marker(l.id),
                        to_marker: v.to_marker(l.id),
                        range: [lo, hi],
                    }
                })
                .collect(),
            corpus: corpus.config.clone(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.num_languages, self.symbols_per_language)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_corpus_dir(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (file, split) in [
        (TRAIN_FILE, Split::Train),
        (TEST_SUPERVISED_FILE, Split::TestSupervised),
        (TEST_ZERO_SHOT_FILE, Split::TestZeroShot),
    ] {
        write_jsonl(&dir.join(file), corpus.split(split).iter().map(|s| SampleRecord::new(s, split)))?;
    }
    let manifest = serde_json::to_string_pretty(&VocabManifest::new(corpus))?;
    std::fs::write(dir.join(VOCAB_FILE), manifest + "\n")?;
    Ok(())
}

/// Loads a dataset directory written by [`write_corpus_dir`], checking every
/// pair against the translation oracle.
pub fn read_corpus_dir(dir: &Path) -> Result<Corpus> {
    let manifest: VocabManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(VOCAB_FILE))?)?;
    let vocab = manifest.vocabulary();
    let languages: Vec<LanguageSpec> = manifest.languages.iter().map(|l| l.spec.clone()).collect();
    let load = |file: &str, split: Split| -> Result<Vec<InstructionSample>> {
        let rows: Vec<SampleRecord> = read_jsonl(&dir.join(file))?;
        rows.into_iter()
            .map(|r| {
                if r.split != split {
                    return Err(Error::Invalid(format!("{file}: record tagged {:?}", r.split)));
                }
                let s = r.into_sample();
                let (src, tgt) = (s.direction.src, s.direction.tgt);
                if src >= languages.len() || tgt >= languages.len() {
                    return Err(Error::Invalid(format!("{file}: direction {} out of range", s.direction.label())));
                }
                if translate_oracle(&languages[src], &languages[tgt], &s.x)? != s.y {
                    return Err(Error::Invalid(format!("{file}: reference disagrees with oracle")));
                }
                Ok(s)
            })
            .collect()
    };
    Ok(Corpus {
        train: load(TRAIN_FILE, Split::Train)?,
        test_supervised: load(TEST_SUPERVISED_FILE, Split::TestSupervised)?,
        test_zero_shot: load(TEST_ZERO_SHOT_FILE, Split::TestZeroShot)?,
        config: manifest.corpus,
        vocab,
        languages,
    })
}
