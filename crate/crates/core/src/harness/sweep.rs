use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::CorruptionVariant;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::model::{Condition, Predictor};
use crate::sampler::{rollout, rollout_distribution, SamplerConfig, SequenceLaw};
use crate::tokenizer::{Image, Tokenizer};

use super::metrics::{exact_kl, toy_frechet_images};
use super::plot::{line_plot, Series};

/// Fixed CSV header of sweep output.
pub const CSV_HEADER: &str = "lambda,n_p,variant,scale_mask,gamma,metric,value,replicate,seed,runtime_ms,error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub fractions: Vec<f64>,
    pub variants: Vec<CorruptionVariant>,
    /// `None` applies VPG at every scale.
    #[serde(default = "SweepGrid::default_masks")]
    pub scale_masks: Vec<Option<Vec<usize>>>,
    #[serde(default = "SweepGrid::default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub base_seed: u64,
}

impl SweepGrid {
    fn default_masks() -> Vec<Option<Vec<usize>>> {
        vec![None]
    }

    fn default_replicates() -> usize {
        1
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.fractions.is_empty() || self.variants.is_empty() || self.scale_masks.is_empty() {
            return Err(Error::Config("every sweep axis needs at least one value".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the grid's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("grid serialises");
        hex::encode(Sha256::digest(json))[..12].to_string()
    }

    /// Seed of one cell. The variant is not part of the path: variants share
    /// corruption draws.
    pub fn cell_seed(&self, mask: usize, fraction: usize, lambda: usize, replicate: usize) -> u64 {
        crate::seed::derive(
            self.base_seed,
            &[mask as u64, fraction as u64, lambda as u64, replicate as u64],
        )
    }
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.5, 1.0, 2.0],
            fractions: vec![0.5],
            variants: vec![CorruptionVariant::SameScaleFullEmbedding],
            scale_masks: Self::default_masks(),
            replicates: 1,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// KL(guided rollout law || unguided untruncated model law), by enumeration.
    ExactKl,
    /// Toy-Fréchet between decoded guided samples and the reference images.
    ToyFrechet,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::ExactKl => "exact_kl",
            Metric::ToyFrechet => "toy_frechet",
        })
    }
}

/// What every sweep cell measures. The cell overrides `vpg_scale`,
/// `corruption_fraction`, `variant` and `scale_mask` of `guidance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub condition: u32,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub metrics: Vec<Metric>,
    /// Guided samples per cell for [`Metric::ToyFrechet`].
    pub frechet_samples: usize,
    /// Reference set for [`Metric::ToyFrechet`].
    #[serde(skip)]
    pub reference_images: Vec<Image>,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub lambda: f64,
    pub n_p: f64,
    pub variant: CorruptionVariant,
    /// `all`, or mask scales joined by `;`.
    pub scale_mask: String,
    pub gamma: f64,
    pub metric: Metric,
    pub value: Option<f64>,
    pub replicate: usize,
    pub seed: u64,
    pub runtime_ms: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<MetricRow>,
    pub grid_hash: String,
}

impl SweepResult {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.error.is_empty()).count()
    }

    pub fn all_failed(&self) -> bool {
        !self.rows.is_empty() && self.failed_rows() == self.rows.len()
    }

    /// One SVG per metric, value against lambda, one series per
    /// `(scale mask, n_p, variant)` with replicates averaged. Returns
    /// `(file name, svg)` pairs; file names carry the grid hash.
    pub fn plots(&self) -> Vec<(String, String)> {
        // metric -> series label -> lambda bits -> (lambda, sum, count)
        type Points = BTreeMap<u64, (f64, f64, usize)>;
        let mut by_metric: BTreeMap<Metric, BTreeMap<String, Points>> = BTreeMap::new();
        for row in &self.rows {
            let Some(value) = row.value else { continue };
            let label = format!("mask={} n_p={} {}", row.scale_mask, row.n_p, row.variant);
            let slot = by_metric
                .entry(row.metric)
                .or_default()
                .entry(label)
                .or_default()
                .entry(row.lambda.to_bits())
                .or_insert((row.lambda, 0.0, 0));
            slot.1 += value;
            slot.2 += 1;
        }
        by_metric
            .into_iter()
            .map(|(metric, series)| {
                let mut series: Vec<Series> = series
                    .into_iter()
                    .map(|(label, points)| {
                        let mut points: Vec<(f64, f64)> =
                            points.into_values().map(|(x, sum, n)| (x, sum / n as f64)).collect();
                        points.sort_by(|a, b| a.0.total_cmp(&b.0));
                        Series { label, points }
                    })
                    .collect();
                series.sort_by(|a, b| a.label.cmp(&b.label));
                let svg = line_plot(&format!("{metric} vs lambda [{}]", self.grid_hash), "lambda", &metric.to_string(), &series);
                (format!("{metric}_{}.svg", self.grid_hash), svg)
            })
            .collect()
    }
}

pub fn write_rows_csv<W: Write>(writer: W, rows: &[MetricRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    out.write_record(CSV_HEADER.split(','))?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

fn mask_label(mask: &Option<Vec<usize>>) -> String {
    match mask {
        None => "all".into(),
        Some(m) => m.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";"),
    }
}

struct Cell {
    mask: usize,
    fraction: usize,
    variant: usize,
    lambda: usize,
    replicate: usize,
}

/// Runs every `(scale mask, variant, n_p, lambda, replicate)` cell in
/// parallel and returns one row per metric per cell, in that order. A cell
/// that fails records its error and the sweep continues.
pub fn run_sweep<P: Predictor + ?Sized>(
    predictor: &P,
    tokenizer: Option<&Tokenizer>,
    grid: &SweepGrid,
    experiment: &Experiment,
) -> Result<SweepResult> {
    grid.validate()?;
    if experiment.metrics.is_empty() {
        return Err(Error::Config("experiment lists no metrics".into()));
    }
    let condition = Condition::Class(experiment.condition);
    condition.validate(predictor.classes())?;
    let data_law = if experiment.metrics.contains(&Metric::ExactKl) {
        Some(rollout_distribution(
            predictor,
            condition,
            &GuidanceConfig::unguided(),
            &SamplerConfig::untruncated(0),
            None,
        ))
    } else {
        None
    };

    let mut cells = Vec::new();
    for mask in 0..grid.scale_masks.len() {
        for variant in 0..grid.variants.len() {
            for fraction in 0..grid.fractions.len() {
                for lambda in 0..grid.lambdas.len() {
                    for replicate in 0..grid.replicates {
                        cells.push(Cell {
                            mask,
                            fraction,
                            variant,
                            lambda,
                            replicate,
                        });
                    }
                }
            }
        }
    }

    let rows = cells
        .par_iter()
        .flat_map_iter(|cell| {
            let seed = grid.cell_seed(cell.mask, cell.fraction, cell.lambda, cell.replicate);
            let guidance = GuidanceConfig {
                vpg_scale: grid.lambdas[cell.lambda],
                corruption_fraction: grid.fractions[cell.fraction],
                variant: grid.variants[cell.variant],
                scale_mask: grid.scale_masks[cell.mask].clone(),
                ..experiment.guidance.clone()
            };
            experiment
                .metrics
                .iter()
                .map(|&metric| {
                    let start = Instant::now();
                    let value = match metric {
                        Metric::ExactKl => match data_law.as_ref().expect("computed above") {
                            Ok(data) => cell_exact_kl(predictor, condition, &guidance, &experiment.sampler, seed, data),
                            Err(e) => Err(Error::Config(format!("data law unavailable: {e}"))),
                        },
                        Metric::ToyFrechet => cell_frechet(predictor, tokenizer, condition, &guidance, experiment, seed),
                    };
                    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
                    let (value, error) = match value {
                        Ok(v) if v.is_finite() => (Some(v), String::new()),
                        Ok(v) => (None, format!("non-finite value {v}")),
                        Err(e) => (None, e.to_string()),
                    };
                    MetricRow {
                        lambda: guidance.vpg_scale,
                        n_p: guidance.corruption_fraction,
                        variant: guidance.variant,
                        scale_mask: mask_label(&guidance.scale_mask),
                        gamma: guidance.cfg_scale,
                        metric,
                        value,
                        replicate: cell.replicate,
                        seed,
                        runtime_ms,
                        error,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(SweepResult {
        rows,
        grid_hash: grid.hash(),
    })
}

fn cell_exact_kl<P: Predictor + ?Sized>(
    predictor: &P,
    condition: Condition,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    seed: u64,
    data: &SequenceLaw,
) -> Result<f64> {
    let law = rollout_distribution(predictor, condition, guidance, sampler, Some(seed))?;
    exact_kl(&law, data)
}

fn cell_frechet<P: Predictor + ?Sized>(
    predictor: &P,
    tokenizer: Option<&Tokenizer>,
    condition: Condition,
    guidance: &GuidanceConfig,
    experiment: &Experiment,
    seed: u64,
) -> Result<f64> {
    let tokenizer = tokenizer.ok_or_else(|| Error::Config("toy_frechet needs a tokenizer".into()))?;
    if experiment.reference_images.len() < 2 {
        return Err(Error::Config("toy_frechet needs at least two reference images".into()));
    }
    let images = (0..experiment.frechet_samples)
        .map(|i| {
            let sampler = SamplerConfig {
                seed: crate::seed::derive(seed, &[i as u64]),
                ..experiment.sampler.clone()
            };
            Ok(rollout(predictor, condition, guidance, &sampler, tokenizer)?.image)
        })
        .collect::<Result<Vec<_>>>()?;
    toy_frechet_images(&images, &experiment.reference_images)
}
