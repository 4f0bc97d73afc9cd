//! Next-scale predictors behind one logits contract.
//!
//! [`TabularModel`] stores an explicit conditional probability table per
//! `(condition, token prefix)` and is small enough to enumerate, which makes it
//! the ground truth for the oracle. [`CountModel`] is a smoothed count model
//! that only sees the prefix through its [`PrefixEmbedding`], so embedding
//! corruption changes its predictions the way it would for a transformer.

mod corpus;
mod count;
mod embed;
pub mod fixtures;
mod tabular;

pub use corpus::{Corpus, CorpusItem};
pub use count::{fit_count_model, CountFitOptions, CountModel, SignatureSpec};
pub use embed::{Embedder, EmbedderSpec, PrefixEmbedding, ScaleEmbedding};
pub use tabular::{build_tabular, TabularModel, PROBABILITY_FLOOR};

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionPlan;
use crate::error::{Error, Result};
use crate::tokenizer::{ScaleSchedule, TokenMap};

/// Total prefix states any enumeration may touch.
pub const ENUMERATION_CAP: u128 = 200_000;

/// External condition `c`, or the null condition used by classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Class(u32),
    Null,
}

impl Condition {
    pub fn validate(self, classes: usize) -> Result<()> {
        match self {
            Condition::Class(c) if c as usize >= classes => Err(Error::InvalidInput(format!(
                "class {c} out of range for {classes} classes"
            ))),
            _ => Ok(()),
        }
    }

    /// Parses `"3"` or `"null"`.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "null" | "∅" => Ok(Condition::Null),
            t => t
                .parse()
                .map(Condition::Class)
                .map_err(|_| Error::InvalidInput(format!("bad condition '{text}'"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Class(c) => write!(f, "{c}"),
            Condition::Null => f.write_str("null"),
        }
    }
}

/// Per-site vocabulary logits for one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitGrid {
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogitGrid {
    pub fn new(scale: usize, height: usize, width: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * vocab {
            return Err(Error::ShapeMismatch(format!(
                "logit grid {height}x{width}x{vocab} got {} values",
                data.len()
            )));
        }
        Ok(Self {
            scale,
            height,
            width,
            vocab,
            data,
        })
    }

    /// Natural-log of per-site probabilities.
    pub fn from_probs(scale: usize, height: usize, width: usize, vocab: usize, probs: &[f64]) -> Result<Self> {
        Self::new(scale, height, width, vocab, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn site(&self, s: usize) -> &[f64] {
        &self.data[s * self.vocab..(s + 1) * self.vocab]
    }

    /// Softmax at every site, concatenated.
    pub fn probs(&self) -> Vec<f64> {
        self.data
            .chunks(self.vocab)
            .flat_map(softmax)
            .collect()
    }

    pub fn check_same_shape(&self, other: &LogitGrid) -> Result<()> {
        if (self.height, self.width, self.vocab) != (other.height, other.width, other.vocab) {
            return Err(Error::ShapeMismatch(format!(
                "logit grids {}x{}x{} and {}x{}x{}",
                self.height, self.width, self.vocab, other.height, other.width, other.vocab
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Numerically stable softmax; `-inf` entries get probability 0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// The branch-evaluation contract shared by every model.
///
/// The scale being predicted is `prefix.len()`; the prefix holds the token
/// maps for scales `0..prefix.len()`.
pub trait Predictor: Sync {
    fn schedule(&self) -> &ScaleSchedule;

    fn vocab(&self) -> usize;

    fn classes(&self) -> usize;

    /// Whether `Condition::Null` can be evaluated.
    fn supports_null(&self) -> bool;

    fn predict(&self, condition: Condition, prefix: &[TokenMap]) -> Result<LogitGrid>;

    /// Per-site probabilities, `sites x vocab`.
    fn site_probs(&self, condition: Condition, prefix: &[TokenMap]) -> Result<Vec<f64>> {
        Ok(self.predict(condition, prefix)?.probs())
    }

    /// Whether [`Predictor::predict_corrupted`] is available.
    fn supports_corruption(&self) -> bool {
        false
    }

    /// Prediction under the corrupted prefix described by `plan`.
    fn predict_corrupted(&self, _condition: Condition, _prefix: &[TokenMap], _plan: &CorruptionPlan) -> Result<LogitGrid> {
        Err(Error::Unsupported("prefix corruption needs an embedding-consuming model"))
    }

    /// Log of the exact prefix-marginalised per-site predictive `p(r_k | c)`
    /// (for `Null`, the uniform mixture over classes).
    fn exact_reference(&self, condition: Condition, scale: usize) -> Result<LogitGrid> {
        crate::oracle::reference_logits(self, condition, scale)
    }
}

/// Memo for prefix-independent reference logits, one slot per `(condition, scale)`.
#[derive(Debug, Clone, Default)]
pub(crate) struct ReferenceCache {
    slots: Vec<OnceLock<LogitGrid>>,
    classes: usize,
}

impl ReferenceCache {
    pub(crate) fn new(classes: usize, scales: usize) -> Self {
        Self {
            slots: (0..(classes + 1) * scales).map(|_| OnceLock::new()).collect(),
            classes,
        }
    }

    pub(crate) fn get_or_compute(
        &self,
        condition: Condition,
        scale: usize,
        compute: impl FnOnce() -> Result<LogitGrid>,
    ) -> Result<LogitGrid> {
        let row = match condition {
            Condition::Class(c) => c as usize,
            Condition::Null => self.classes,
        };
        let Some(slot) = self.slots.get(scale * (self.classes + 1) + row) else {
            return compute();
        };
        if let Some(v) = slot.get() {
            return Ok(v.clone());
        }
        let v = compute()?;
        let _ = slot.set(v.clone());
        Ok(v)
    }
}

/// Checks a prefix against the predictor's schedule and vocabulary.
pub fn validate_prefix<P: Predictor + ?Sized>(model: &P, prefix: &[TokenMap]) -> Result<()> {
    if prefix.len() >= model.schedule().len() {
        return Err(Error::InvalidInput(format!(
            "prefix of {} scales leaves nothing to predict in a {}-scale schedule",
            prefix.len(),
            model.schedule().len()
        )));
    }
    for (j, map) in prefix.iter().enumerate() {
        if map.scale != j {
            return Err(Error::ShapeMismatch(format!(
                "prefix position {j} holds a map for scale {}",
                map.scale
            )));
        }
        map.validate(model.schedule(), model.vocab())?;
    }
    Ok(())
}
