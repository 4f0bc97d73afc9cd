//! Run configuration: one JSON document with a `version` field that pins the
//! schedule, tokenizer, model, guidance, sampler, sweep grid and verification
//! suite. Unknown keys are rejected.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, ReferenceMode};
use crate::harness::{run_verify, Experiment, Metric, SweepGrid, VerifyOutcome, VerifySpec};
use crate::model::{
    build_tabular, fit_count_model, Condition, Corpus, CountFitOptions, CountModel, EmbedderSpec, Predictor,
    SignatureSpec, TabularModel,
};
use crate::sampler::SamplerConfig;
use crate::tokenizer::{Codebook, CodebookSpec, Decoder, Image, ScaleSchedule, Tokenizer};

pub const CONFIG_VERSION: u32 = 1;

/// How the decoder is built.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderSpec {
    #[default]
    Identity,
    /// `A = I + 0.1 G`, `b = 0.1 g` with seeded standard normal entries.
    Affine { seed: u64 },
}

impl DecoderSpec {
    pub fn build(&self, dim: usize) -> Decoder {
        match self {
            DecoderSpec::Identity => Decoder::Identity,
            DecoderSpec::Affine { seed } => Decoder::seeded_affine(dim, *seed),
        }
    }
}

/// Which model the laboratory runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Seeded Dirichlet(1) tables.
    Tabular {
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    /// Count model fit on a token-sequence CSV, or on a seeded synthetic corpus when `corpus` is absent.
    Count {
        #[serde(default)]
        corpus: Option<PathBuf>,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_corpus_size")]
        corpus_size: usize,
        #[serde(default)]
        corpus_seed: u64,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        signature: SignatureSpec,
        #[serde(default)]
        embedder: EmbedderSpec,
        #[serde(default = "default_true")]
        include_null: bool,
    },
    /// A model previously written by `fit` or `config`.
    File { path: PathBuf },
}

fn default_classes() -> usize {
    2
}

fn default_corpus_size() -> usize {
    256
}

fn default_alpha() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Tabular {
            seed: 0,
            classes: default_classes(),
        }
    }
}

/// Sweep metrics and the reference set for toy-Fréchet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub metrics: Vec<Metric>,
    /// Guided samples per sweep cell for toy-Fréchet.
    pub frechet_samples: usize,
    /// Synthetic reference images of the configured condition.
    pub reference_samples: usize,
    pub reference_seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::ExactKl],
            frechet_samples: 32,
            reference_samples: 64,
            reference_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "RunConfig::default_schedule")]
    pub schedule: ScaleSchedule,
    #[serde(default = "RunConfig::default_vocab")]
    pub vocab: usize,
    #[serde(default = "RunConfig::default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default)]
    pub codebook: CodebookSpec,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub model: ModelSpec,
    /// Class used by `sample`, `sweep` and `ablate`.
    #[serde(default)]
    pub condition: u32,
    #[serde(default = "RunConfig::default_guidance")]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub experiment: ExperimentSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default = "RunConfig::default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    fn default_schedule() -> ScaleSchedule {
        ScaleSchedule::new(vec![(1, 1), (1, 2), (2, 2)]).unwrap()
    }

    fn default_vocab() -> usize {
        4
    }

    fn default_latent_dim() -> usize {
        2
    }

    fn default_guidance() -> GuidanceConfig {
        GuidanceConfig {
            cfg_scale: 1.0,
            vpg_scale: 1.0,
            reference: ReferenceMode::ExactMarginal,
            ..GuidanceConfig::default()
        }
    }

    fn default_output_dir() -> PathBuf {
        PathBuf::from("vpglab-out")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Deserialises and validates an already-parsed document.
    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file. Syntax and schema problems are
    /// [`Error::Config`]; a missing or unreadable file is [`Error::Io`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let config: Self = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.model {
            ModelSpec::Tabular { classes, .. } | ModelSpec::Count { classes, .. } => Some(*classes),
            ModelSpec::File { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.vocab < 1 {
            return Err(Error::Config("vocab must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if let Some(classes) = self.classes() {
            if classes == 0 {
                return Err(Error::Config("model.classes must be at least 1".into()));
            }
            if self.condition as usize >= classes {
                return Err(Error::Config(format!(
                    "condition {} out of range for {classes} classes",
                    self.condition
                )));
            }
        }
        if let ModelSpec::Count { alpha, .. } = &self.model {
            if !(*alpha > 0.0) || !alpha.is_finite() {
                return Err(Error::Config(format!("model.alpha must be positive, got {alpha}")));
            }
        }
        self.guidance.validate(self.schedule.len())?;
        self.sampler.validate()?;
        self.sweep.validate()?;
        self.verify.validate()?;
        if let Some(masks) = self.sweep.scale_masks.iter().flatten().find(|m| m.iter().any(|&k| k >= self.schedule.len())) {
            return Err(Error::Config(format!("sweep scale mask {masks:?} names a scale beyond the schedule")));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        let book = Codebook::seeded(self.schedule.len(), self.vocab, self.latent_dim, &self.codebook)?;
        Tokenizer::new(self.schedule.clone(), book, self.decoder.build(self.latent_dim))
    }

    /// Builds (or loads, or fits) the configured model.
    pub fn build_model(&self) -> Result<LabModel> {
        let model = match &self.model {
            ModelSpec::Tabular { seed, classes } => {
                LabModel::Tabular(build_tabular(&self.schedule, self.vocab, *classes, *seed)?)
            }
            ModelSpec::Count {
                corpus,
                classes,
                corpus_size,
                corpus_seed,
                alpha,
                signature,
                embedder,
                include_null,
            } => {
                let tokenizer = self.tokenizer()?;
                let corpus = match corpus {
                    Some(path) => Corpus::read_csv(File::open(path)?, &self.schedule)?,
                    None => Corpus::synthetic(&tokenizer, *classes, *corpus_size, *corpus_seed)?,
                };
                let options = CountFitOptions {
                    alpha: *alpha,
                    signature: *signature,
                    include_null: *include_null,
                };
                LabModel::Count(Box::new(fit_count_model(&corpus, tokenizer, *embedder, *classes, options)?))
            }
            ModelSpec::File { path } => LabModel::load(path)?,
        };
        let p = model.predictor();
        if p.schedule() != &self.schedule || p.vocab() != self.vocab {
            return Err(Error::Config(format!(
                "model has vocab {} over {} scales but the config says vocab {} over {} scales",
                p.vocab(),
                p.schedule().len(),
                self.vocab,
                self.schedule.len()
            )));
        }
        Condition::Class(self.condition).validate(p.classes())?;
        Ok(model)
    }

    /// Runs the verification suite, adding the configured model when it is tabular.
    pub fn run_verify(&self) -> Result<VerifyOutcome> {
        let model = match &self.model {
            ModelSpec::Tabular { .. } | ModelSpec::File { .. } => Some(self.build_model()?),
            ModelSpec::Count { .. } => None,
        };
        let extra: Vec<(String, &TabularModel)> = model
            .as_ref()
            .and_then(LabModel::as_tabular)
            .map(|m| ("configured".to_string(), m))
            .into_iter()
            .collect();
        run_verify(&self.verify, &extra)
    }

    /// The sweep experiment for the configured condition, guidance and sampler.
    pub fn experiment(&self, tokenizer: &Tokenizer, classes: usize) -> Result<Experiment> {
        let reference_images = if self.experiment.metrics.contains(&Metric::ToyFrechet) {
            self.reference_images(tokenizer, classes)?
        } else {
            Vec::new()
        };
        Ok(Experiment {
            condition: self.condition,
            guidance: self.guidance.clone(),
            sampler: self.sampler.clone(),
            metrics: self.experiment.metrics.clone(),
            frechet_samples: self.experiment.frechet_samples,
            reference_images,
        })
    }

    /// Decoded synthetic images of the configured condition, for toy-Fréchet.
    pub fn reference_images(&self, tokenizer: &Tokenizer, classes: usize) -> Result<Vec<Image>> {
        let size = self.experiment.reference_samples * classes;
        let corpus = Corpus::synthetic(tokenizer, classes, size, self.experiment.reference_seed)?;
        corpus
            .items
            .iter()
            .filter(|item| item.condition == self.condition)
            .map(|item| tokenizer.decode_maps(&item.maps))
            .collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            schedule: Self::default_schedule(),
            vocab: Self::default_vocab(),
            latent_dim: Self::default_latent_dim(),
            codebook: CodebookSpec::default(),
            decoder: DecoderSpec::default(),
            model: ModelSpec::default(),
            condition: 0,
            guidance: Self::default_guidance(),
            sampler: SamplerConfig::default(),
            sweep: SweepGrid::default(),
            experiment: ExperimentSpec::default(),
            verify: VerifySpec::default(),
            output_dir: Self::default_output_dir(),
        }
    }
}

/// A built model of either family.
#[derive(Debug, Clone)]
pub enum LabModel {
    Tabular(TabularModel),
    Count(Box<CountModel>),
}

impl LabModel {
    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            LabModel::Tabular(m) => m,
            LabModel::Count(m) => m.as_ref(),
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularModel> {
        match self {
            LabModel::Tabular(m) => Some(m),
            LabModel::Count(_) => None,
        }
    }

    /// Reads a model JSON file of either family.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("version").and_then(|v| v.as_str()).unwrap_or_default();
        if version.starts_with("vpglab-tabular/") {
            Ok(LabModel::Tabular(serde_json::from_value(value)?))
        } else if version.starts_with("vpglab-count/") {
            Ok(LabModel::Count(Box::new(serde_json::from_value(value)?)))
        } else {
            Err(Error::Config(format!("{}: unrecognised model version '{version}'", path.display())))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(match self {
            LabModel::Tabular(m) => serde_json::to_string_pretty(m)?,
            LabModel::Count(m) => serde_json::to_string_pretty(m.as_ref())?,
        })
    }
}
