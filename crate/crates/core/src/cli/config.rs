use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::CorpusConfig;
use crate::trainer::TrainConfig;

/// Everything one experiment needs. Files given with `--config` are
/// merged key by key over [`ExperimentConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub decode: DecodeConfig,
    pub out: PathBuf,
    /// Copied into every section whose own `seed` the file leaves unset.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        Self {
            model: ModelConfig {
                vocab_size: corpus.vocabulary().size(),
                ..ModelConfig::default()
            },
            corpus,
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            decode: DecodeConfig::default(),
            out: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else
/// replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

const SEEDED: [&str; 4] = ["corpus", "model", "stage1", "stage2"];

impl ExperimentConfig {
    /// Parses a partial JSON document, fills defaults and derived fields,
    /// and validates the result.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !patch.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut merged = serde_json::to_value(Self::default())?;
        merge_json(&mut merged, patch.clone());
        let mut cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        for section in SEEDED {
            if patch.pointer(&format!("/{section}/seed")).is_none() {
                cfg.set_seed(section);
            }
        }
        let vocab = cfg.corpus.vocabulary().size();
        if patch.pointer("/model/vocab_size").is_none() {
            cfg.model.vocab_size = vocab;
        }
        cfg.corpus = cfg.corpus.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            }
            None => Self::from_json("{}"),
        }
    }

    fn set_seed(&mut self, section: &str) {
        let s = self.seed;
        match section {
            "corpus" => self.corpus.seed = s,
            "model" => self.model.seed = s,
            "stage1" => self.stage1.seed = s,
            "stage2" => self.stage2.seed = s,
            _ => unreachable!(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.decode.validate()?;
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::Config("stage1/stage2 sections must carry stage 1 and 2".into()));
        }
        let vocab = self.corpus.vocabulary().size();
        if self.model.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model vocab_size {} disagrees with corpus vocabulary {vocab}",
                self.model.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
