//! Synthetic languages with an exact translation oracle.
//!
//! Every language renders the same abstract "concept" sequences into its own
//! disjoint block of content tokens, so the language of any output can be
//! read off its token ids and every reference translation is computable.

mod corpus;
mod format;
mod io;

pub use corpus::{
    conflict_pool, make_conflicting, make_corpus, ConflictConfig, ConflictPool, ConflictingSample, Corpus,
    CorpusConfig, InstructionSample, Split,
};
pub use format::{format_sample, FormattedSample, Template};
pub use io::{read_corpus_dir, read_jsonl, write_corpus_dir, write_jsonl, SampleRecord, VocabManifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const TRANSLATE: TokenId = 4;

/// Token-id layout: five specials, then one `FROM_Li` and one `TO_Li`
/// marker per language, then `symbols` content tokens per language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub num_languages: usize,
    pub symbols: usize,
}

impl Vocabulary {
    pub fn new(num_languages: usize, symbols: usize) -> Self {
        Self { num_languages, symbols }
    }

    pub fn from_marker(&self, lang: usize) -> TokenId {
        (5 + lang) as TokenId
    }

    pub fn to_marker(&self, lang: usize) -> TokenId {
        (5 + self.num_languages + lang) as TokenId
    }

    pub fn content_offset(&self, lang: usize) -> TokenId {
        (5 + 2 * self.num_languages + lang * self.symbols) as TokenId
    }

    pub fn size(&self) -> usize {
        5 + 2 * self.num_languages + self.num_languages * self.symbols
    }

    /// Half-open content range `[lo, hi)` of a language.
    pub fn content_range(&self, lang: usize) -> (TokenId, TokenId) {
        let lo = self.content_offset(lang);
        (lo, lo + self.symbols as TokenId)
    }

    pub fn language_of(&self, token: TokenId) -> Option<usize> {
        let first = self.content_offset(0);
        if token < first {
            return None;
        }
        let lang = (token - first) as usize / self.symbols;
        (lang < self.num_languages).then_some(lang)
    }

    /// `TRANSLATE · FROM_src · TO_tgt`
    pub fn instruction(&self, dir: Direction) -> Vec<TokenId> {
        vec![TRANSLATE, self.from_marker(dir.src), self.to_marker(dir.tgt)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Direction {
    pub src: usize,
    pub tgt: usize,
}

impl Direction {
    pub fn new(src: usize, tgt: usize) -> Self {
        Self { src, tgt }
    }

    pub fn reversed(self) -> Self {
        Self::new(self.tgt, self.src)
    }

    pub fn label(self) -> String {
        format!("L{}-L{}", self.src, self.tgt)
    }
}

impl From<[usize; 2]> for Direction {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Direction> for [usize; 2] {
    fn from(d: Direction) -> Self {
        [d.src, d.tgt]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordOrder {
    Forward,
    Reversed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: usize,
    pub offset: TokenId,
    pub permutation: Vec<usize>,
    pub order: WordOrder,
}

impl LanguageSpec {
    pub fn new(id: usize, offset: TokenId, permutation: Vec<usize>, order: WordOrder) -> Result<Self> {
        let mut seen = vec![false; permutation.len()];
        for &p in &permutation {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("language {id}: permutation is not a bijection")));
            }
        }
        Ok(Self { id, offset, permutation, order })
    }

    /// The default family: L0 and L1 plain relabelings, L2 reversed word
    /// order, L3 symbols rotated by five. Further languages cycle the pattern.
    pub fn default_family(vocab: &Vocabulary) -> Vec<LanguageSpec> {
        let s = vocab.symbols;
        (0..vocab.num_languages)
            .map(|id| {
                let (perm, order) = match id % 4 {
                    2 => ((0..s).collect(), WordOrder::Reversed),
                    3 => ((0..s).map(|i| (i + 5) % s).collect(), WordOrder::Forward),
                    _ => ((0..s).collect(), WordOrder::Forward),
                };
                LanguageSpec {
                    id,
                    offset: vocab.content_offset(id),
                    permutation: perm,
                    order,
                }
            })
            .collect()
    }

    pub fn symbols(&self) -> usize {
        self.permutation.len()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token >= self.offset && ((token - self.offset) as usize) < self.symbols()
    }

    /// Order rule, then symbol permutation, then token offset.
    pub fn render(&self, concepts: &[usize]) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(concepts.len());
        for &c in concepts {
            let p = *self.permutation.get(c).ok_or(Error::Index {
                op: "render",
                index: c,
                limit: self.symbols(),
            })?;
            out.push(self.offset + p as TokenId);
        }
        if self.order == WordOrder::Reversed {
            out.reverse();
        }
        Ok(out)
    }

    /// Inverse of [`render`](Self::render).
    pub fn invert(&self, tokens: &[TokenId]) -> Result<Vec<usize>> {
        let mut inverse = vec![0; self.symbols()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inverse[p] = i;
        }
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if !self.contains(t) {
                return Err(Error::Invalid(format!(
                    "token {t} outside content range of L{} [{}, {})",
                    self.id,
                    self.offset,
                    self.offset as usize + self.symbols()
                )));
            }
            out.push(inverse[(t - self.offset) as usize]);
        }
        if self.order == WordOrder::Reversed {
            out.reverse();
        }
        Ok(out)
    }
}

/// Ground-truth translation: recover the concepts from `src`, render in `tgt`.
pub fn translate_oracle(src: &LanguageSpec, tgt: &LanguageSpec, src_tokens: &[TokenId]) -> Result<Vec<TokenId>> {
    tgt.render(&src.invert(src_tokens)?)
}

#[cfg(test)]
mod tests;
