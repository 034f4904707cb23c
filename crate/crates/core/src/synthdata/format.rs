use serde::{Deserialize, Serialize};

use super::{InstructionSample, TokenId, BOS, EOS, SEP};
use crate::error::{Error, Result};

/// Prompt layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    /// `BOS ins SEP x SEP`
    #[default]
    PreIns,
    /// `BOS x SEP ins SEP`
    PostIns,
}

impl std::str::FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-ins" => Ok(Template::PreIns),
            "post-ins" => Ok(Template::PostIns),
            other => Err(Error::Config(format!("unknown template {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormattedSample {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// Over `prompt ++ target`; true exactly on target positions.
    pub loss_mask: Vec<bool>,
}

impl FormattedSample {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.target);
        t
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn push_query(out: &mut Vec<TokenId>, s: &InstructionSample, template: Template) {
    let (first, second) = match template {
        Template::PreIns => (&s.ins, &s.x),
        Template::PostIns => (&s.x, &s.ins),
    };
    out.extend_from_slice(first);
    out.push(SEP);
    out.extend_from_slice(second);
    out.push(SEP);
}

/// Lays out `sample` (preceded by complete demonstration blocks) as a
/// prompt and a target `y EOS`.
pub fn format_sample(
    sample: &InstructionSample,
    template: Template,
    demos: &[InstructionSample],
    max_context: usize,
) -> Result<FormattedSample> {
    let mut prompt = vec![BOS];
    for d in demos {
        push_query(&mut prompt, d, template);
        prompt.extend_from_slice(&d.y);
        prompt.push(EOS);
    }
    push_query(&mut prompt, sample, template);
    let mut target = sample.y.clone();
    target.push(EOS);
    let len = prompt.len() + target.len();
    if len > max_context {
        return Err(Error::ContextOverflow { len, limit: max_context });
    }
    let mut loss_mask = vec![false; prompt.len()];
    loss_mask.resize(len, true);
    Ok(FormattedSample {
        prompt,
        target,
        loss_mask,
    })
}
