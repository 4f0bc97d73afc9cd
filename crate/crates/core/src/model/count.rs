use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{validate_prefix, Condition, Corpus, Embedder, EmbedderSpec, LogitGrid, Predictor, PrefixEmbedding, ReferenceCache};
use crate::corruption::{apply_corruption, CorruptionPlan};
use crate::error::{Error, Result};
use crate::tokenizer::{ScaleSchedule, TokenMap, Tokenizer};

const FORMAT_VERSION: &str = "vpglab-count/1";

/// Quantisation of the per-scale mean prefix embedding into a seeded product grid.
///
/// Each embedding coordinate is binned into `bins` equal cells covering
/// `[-range, range]` (values outside clamp to the edge cells); the grid is
/// shifted per `(scale, coordinate)` by a seeded offset in half a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureSpec {
    #[serde(default = "SignatureSpec::default_bins")]
    pub bins: u8,
    #[serde(default = "SignatureSpec::default_range")]
    pub range: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SignatureSpec {
    fn default_bins() -> u8 {
        4
    }

    fn default_range() -> f64 {
        2.0
    }

    fn validate(&self) -> Result<()> {
        if self.bins == 0 || !(self.range > 0.0) {
            return Err(Error::Config("signature needs at least one bin and a positive range".into()));
        }
        Ok(())
    }

    fn offsets(&self, scales: usize, dim: usize) -> Vec<Vec<f64>> {
        let width = 2.0 * self.range / self.bins as f64;
        let mut rng = crate::seed::rng(self.seed);
        (0..scales)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.random_range(-0.5..0.5) * width)
                    .collect()
            })
            .collect()
    }
}

impl Default for SignatureSpec {
    fn default() -> Self {
        Self {
            bins: Self::default_bins(),
            range: Self::default_range(),
            seed: 0,
        }
    }
}

/// Fitting options for [`fit_count_model`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountFitOptions {
    /// Additive smoothing; must be positive.
    pub alpha: f64,
    pub signature: SignatureSpec,
    /// Also fit pooled rows for the null condition.
    pub include_null: bool,
}

impl Default for CountFitOptions {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            signature: SignatureSpec::default(),
            include_null: true,
        }
    }
}

type Key = (usize, Condition, Vec<u8>);

/// Smoothed count model that reads the prefix only through its embedding.
///
/// Predictions at scale `k` are `(n + alpha) / (N + alpha V)` per site, where
/// `n` counts how often each token appeared at that site among training
/// prefixes with the same `(k, condition, signature)`.
#[derive(Debug, Clone)]
pub struct CountModel {
    tokenizer: Tokenizer,
    embedder: Embedder,
    classes: usize,
    options: CountFitOptions,
    offsets: Vec<Vec<f64>>,
    counts: HashMap<Key, Vec<u64>>,
    reference: ReferenceCache,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CountFile {
    version: String,
    tokenizer: Tokenizer,
    embedder: EmbedderSpec,
    classes: usize,
    options: CountFitOptions,
    tables: Vec<CountEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CountEntry {
    scale: usize,
    condition: Condition,
    signature: Vec<u8>,
    counts: Vec<u64>,
}

/// Fits a [`CountModel`] on an encoded corpus.
pub fn fit_count_model(
    corpus: &Corpus,
    tokenizer: Tokenizer,
    embedder: EmbedderSpec,
    classes: usize,
    options: CountFitOptions,
) -> Result<CountModel> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot fit a count model on an empty corpus".into()));
    }
    corpus.validate(&tokenizer.schedule, tokenizer.vocab(), classes)?;
    let mut model = CountModel::empty(tokenizer, embedder, classes, options)?;
    let vocab = model.vocab();
    for item in &corpus.items {
        for k in 0..model.tokenizer.schedule.len() {
            let embedding = model.embedder.embed_prefix(&item.maps[..k], &model.tokenizer)?;
            let signature = model.signature(&embedding);
            let mut conditions = vec![Condition::Class(item.condition)];
            if options.include_null {
                conditions.push(Condition::Null);
            }
            let sites = model.tokenizer.schedule.sites(k);
            for condition in conditions {
                let row = model
                    .counts
                    .entry((k, condition, signature.clone()))
                    .or_insert_with(|| vec![0; sites * vocab]);
                for (s, &id) in item.maps[k].ids.iter().enumerate() {
                    row[s * vocab + id as usize] += 1;
                }
            }
        }
    }
    Ok(model)
}

impl CountModel {
    fn empty(tokenizer: Tokenizer, embedder: EmbedderSpec, classes: usize, options: CountFitOptions) -> Result<Self> {
        if !(options.alpha > 0.0) || !options.alpha.is_finite() {
            return Err(Error::Config(format!(
                "smoothing constant must be positive and finite, got {}",
                options.alpha
            )));
        }
        if classes == 0 {
            return Err(Error::InvalidInput("count model needs at least one class".into()));
        }
        options.signature.validate()?;
        let embedder = Embedder::new(embedder, &tokenizer.schedule, tokenizer.dim())?;
        let offsets = options.signature.offsets(tokenizer.schedule.len(), embedder.dim());
        let reference = ReferenceCache::new(classes, tokenizer.schedule.len());
        Ok(Self {
            tokenizer,
            embedder,
            classes,
            options,
            offsets,
            counts: HashMap::new(),
            reference,
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn options(&self) -> CountFitOptions {
        self.options
    }

    /// Number of fitted `(scale, condition, signature)` rows.
    pub fn num_rows(&self) -> usize {
        self.counts.len()
    }

    /// Binned per-scale mean embedding, concatenated over prefix scales.
    pub fn signature(&self, embedding: &PrefixEmbedding) -> Vec<u8> {
        let spec = self.options.signature;
        let width = 2.0 * spec.range / spec.bins as f64;
        let mut out = Vec::with_capacity(embedding.scales.len() * embedding.dim);
        for j in 0..embedding.scales.len() {
            for (d, x) in embedding.mean(j).into_iter().enumerate() {
                let cell = ((x + spec.range + self.offsets[j][d]) / width).floor();
                out.push(cell.clamp(0.0, spec.bins as f64 - 1.0) as u8);
            }
        }
        out
    }

    /// Smoothed per-site probabilities for an embedded prefix.
    pub fn embedding_probs(&self, condition: Condition, embedding: &PrefixEmbedding) -> Result<Vec<f64>> {
        condition.validate(self.classes)?;
        if condition == Condition::Null && !self.options.include_null {
            return Err(Error::Config("count model was fit without null-condition rows".into()));
        }
        let k = embedding.target_scale;
        if k >= self.tokenizer.schedule.len() {
            return Err(Error::InvalidInput(format!("no scale {k} to predict")));
        }
        let vocab = self.vocab();
        let sites = self.tokenizer.schedule.sites(k);
        let alpha = self.options.alpha;
        let key = (k, condition, self.signature(embedding));
        Ok(match self.counts.get(&key) {
            Some(row) => row
                .chunks(vocab)
                .flat_map(|site| {
                    let total: u64 = site.iter().sum();
                    let z = total as f64 + alpha * vocab as f64;
                    site.iter().map(move |&n| (n as f64 + alpha) / z)
                })
                .collect(),
            None => vec![1.0 / vocab as f64; sites * vocab],
        })
    }

    pub fn predict_embedding(&self, condition: Condition, embedding: &PrefixEmbedding) -> Result<LogitGrid> {
        let probs = self.embedding_probs(condition, embedding)?;
        let k = embedding.target_scale;
        let (h, w) = self.tokenizer.schedule.dims(k);
        LogitGrid::from_probs(k, h, w, self.vocab(), &probs)
    }
}

impl Predictor for CountModel {
    fn schedule(&self) -> &ScaleSchedule {
        &self.tokenizer.schedule
    }

    fn vocab(&self) -> usize {
        self.tokenizer.vocab()
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn supports_null(&self) -> bool {
        self.options.include_null
    }

    fn predict(&self, condition: Condition, prefix: &[TokenMap]) -> Result<LogitGrid> {
        validate_prefix(self, prefix)?;
        let embedding = self.embedder.embed_prefix(prefix, &self.tokenizer)?;
        self.predict_embedding(condition, &embedding)
    }

    fn site_probs(&self, condition: Condition, prefix: &[TokenMap]) -> Result<Vec<f64>> {
        validate_prefix(self, prefix)?;
        let embedding = self.embedder.embed_prefix(prefix, &self.tokenizer)?;
        self.embedding_probs(condition, &embedding)
    }

    fn supports_corruption(&self) -> bool {
        true
    }

    fn predict_corrupted(&self, condition: Condition, prefix: &[TokenMap], plan: &CorruptionPlan) -> Result<LogitGrid> {
        validate_prefix(self, prefix)?;
        let embedding = self.embedder.embed_prefix(prefix, &self.tokenizer)?;
        let corrupted = apply_corruption(&embedding, plan, &self.embedder, &self.tokenizer)?;
        self.predict_embedding(condition, &corrupted)
    }

    fn exact_reference(&self, condition: Condition, scale: usize) -> Result<LogitGrid> {
        condition.validate(self.classes)?;
        self.reference.get_or_compute(condition, scale, || {
            crate::oracle::reference_logits(self, condition, scale)
        })
    }
}

impl Serialize for CountModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut tables: Vec<CountEntry> = self
            .counts
            .iter()
            .map(|((scale, condition, signature), counts)| CountEntry {
                scale: *scale,
                condition: *condition,
                signature: signature.clone(),
                counts: counts.clone(),
            })
            .collect();
        tables.sort_by(|a, b| (a.scale, a.condition, &a.signature).cmp(&(b.scale, b.condition, &b.signature)));
        CountFile {
            version: FORMAT_VERSION.to_string(),
            tokenizer: self.tokenizer.clone(),
            embedder: self.embedder.spec(),
            classes: self.classes,
            options: self.options,
            tables,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for CountModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = CountFile::deserialize(deserializer)?;
        if file.version != FORMAT_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported count model version '{}'",
                file.version
            )));
        }
        let mut model = CountModel::empty(file.tokenizer, file.embedder, file.classes, file.options)
            .map_err(D::Error::custom)?;
        let vocab = model.vocab();
        for entry in file.tables {
            if entry.scale >= model.tokenizer.schedule.len()
                || entry.counts.len() != model.tokenizer.schedule.sites(entry.scale) * vocab
            {
                return Err(D::Error::custom(format!(
                    "count table for scale {} has the wrong shape",
                    entry.scale
                )));
            }
            model
                .counts
                .insert((entry.scale, entry.condition, entry.signature), entry.counts);
        }
        Ok(model)
    }
}
