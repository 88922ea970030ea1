//! Finding labels to text prompts, and prompts to a two-token embedding from
//! two frozen hash-projection encoders.
//!
//! Encoder 1 sums a fixed pseudo-random 64-d vector per word; encoder 2 sums
//! 32-d vectors for words and adjacent word pairs under a different salt.
//! Each output is L2-normalised; the pair forms the cross-attention context.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::findings::{FindingLabel, LabelVector};
use crate::seed;

pub const PROMPT_PREFIX: &str = "Chest X-ray of a subject with ";
pub const D1: usize = 64;
pub const D2: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub token1: Vec<f64>,
    pub token2: Vec<f64>,
}

impl PromptEmbedding {
    pub fn dims(&self) -> (usize, usize) {
        (self.token1.len(), self.token2.len())
    }

    pub fn concat_dim(&self) -> usize {
        self.token1.len() + self.token2.len()
    }

    pub fn concatenated(&self) -> Vec<f64> {
        self.token1.iter().chain(&self.token2).copied().collect()
    }

    pub fn is_null(&self) -> bool {
        self.token1.iter().chain(&self.token2).all(|v| *v == 0.0)
    }
}

pub fn null_embedding() -> PromptEmbedding {
    PromptEmbedding { token1: vec![0.0; D1], token2: vec![0.0; D2] }
}

/// Names in vocabulary order, comma separated with "and" before the last.
pub fn labels_to_prompt(labels: &LabelVector) -> Prompt {
    let names = labels.names();
    let list = match names.as_slice() {
        [] => unreachable!("label vectors hold at least one finding"),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    Prompt { text: format!("{PROMPT_PREFIX}{list}") }
}

/// Inverse of [`labels_to_prompt`].
pub fn parse_prompt(text: &str) -> Result<LabelVector> {
    let rest = text
        .strip_prefix(PROMPT_PREFIX)
        .ok_or_else(|| Error::InvalidLabels(format!("prompt does not start with `{}`", PROMPT_PREFIX.trim_end())))?;
    let (head, last) = match rest.rsplit_once(" and ") {
        Some((h, l)) => (Some(h), l),
        None => (None, rest),
    };
    let mut labels = Vec::new();
    if let Some(h) = head {
        for name in h.split(", ") {
            labels.push(FindingLabel::from_name(name)?);
        }
    }
    labels.push(FindingLabel::from_name(last)?);
    let lv = LabelVector::from_labels(&labels)?;
    if labels_to_prompt(&lv).text != text {
        return Err(Error::InvalidLabels(format!("prompt `{text}` is not in canonical form")));
    }
    Ok(lv)
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn feature_vector(salt: &str, feature: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::new().chain_update(salt).chain_update([0u8]).chain_update(feature).finalize();
    let s = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    let mut rng = seed::rng(s);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn embed_prompt(prompt: &Prompt) -> Result<PromptEmbedding> {
    let ws = words(&prompt.text);
    if ws.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut t1 = vec![0.0; D1];
    for w in &ws {
        for (a, b) in t1.iter_mut().zip(feature_vector("enc1", w, D1)) {
            *a += b;
        }
    }
    let mut t2 = vec![0.0; D2];
    let bigrams = ws.windows(2).map(|p| format!("{} {}", p[0], p[1]));
    for f in ws.iter().cloned().chain(bigrams) {
        for (a, b) in t2.iter_mut().zip(feature_vector("enc2", &f, D2)) {
            *a += b;
        }
    }
    Ok(PromptEmbedding { token1: normalized(t1), token2: normalized(t2) })
}

pub fn embed_labels(labels: &LabelVector) -> PromptEmbedding {
    embed_prompt(&labels_to_prompt(labels)).expect("template prompts are non-empty")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMapping {
    pub labels: LabelVector,
    pub prompt: String,
}

/// Every valid label vector over `classes` with its prompt.
pub fn prompt_table(classes: &[FindingLabel]) -> Vec<PromptMapping> {
    let mut out = Vec::new();
    for mask in 1u32..(1 << classes.len()) {
        let chosen: Vec<FindingLabel> =
            classes.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect();
        if let Ok(lv) = LabelVector::from_labels(&chosen) {
            out.push(PromptMapping { prompt: labels_to_prompt(&lv).text, labels: lv });
        }
    }
    out
}

pub fn prompt_table_json(classes: &[FindingLabel]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&prompt_table(classes))?)
}
