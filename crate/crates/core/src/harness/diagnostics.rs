use serde::{Deserialize, Serialize};

use crate::corruption::{plan_corruption, CorruptionVariant};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::model::{Condition, Corpus, CorpusItem, Predictor};
use crate::oracle::site_marginals;
use crate::sampler::{generate, SamplerConfig};
use crate::tokenizer::TokenMap;

use super::metrics::kl;

/// How far a corrupted-prefix branch sits from the exact prefix marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRow {
    pub variant: crate::corruption::CorruptionVariant,
    pub fraction: f64,
    pub samples: usize,
    /// Mean over plans of KL(corrupted || marginal), summed over sites.
    pub corrupted_kl: f64,
    /// Standard error of `corrupted_kl`; zero for a single sample.
    pub std_error: f64,
    /// KL(clean || marginal), summed over sites.
    pub clean_kl: f64,
}

fn site_kl_sum(p: &[f64], q: &[f64], vocab: usize) -> Result<f64> {
    p.chunks(vocab)
        .zip(q.chunks(vocab))
        .map(|(a, b)| kl(a, b))
        .sum()
}

fn mean_and_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// For every `(variant, fraction)` pair, the Monte Carlo mean over
/// `samples` plans of KL(corrupted-branch prediction || exact prefix
/// marginal), next to the clean-branch KL. Plan `i` for fraction index `f`
/// uses seed `derive(seed, [f, i])`, shared across variants.
pub fn surrogate_gap<P: Predictor + ?Sized>(
    model: &P,
    condition: Condition,
    prefix: &[TokenMap],
    variants: &[CorruptionVariant],
    fractions: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<SurrogateRow>> {
    if samples == 0 {
        return Err(Error::InvalidInput("surrogate gap needs at least one plan sample".into()));
    }
    if !model.supports_corruption() {
        return Err(Error::Unsupported("surrogate gap needs an embedding-consuming model"));
    }
    let k = prefix.len();
    let vocab = model.vocab();
    let marginal = site_marginals(model, condition, k)?;
    let clean = model.site_probs(condition, prefix)?;
    let clean_kl = site_kl_sum(&clean, &marginal, vocab)?;
    let mut rows = Vec::new();
    for &variant in variants {
        for (f, &fraction) in fractions.iter().enumerate() {
            let values = (0..samples)
                .map(|i| {
                    let plan_seed = crate::seed::derive(seed, &[f as u64, i as u64]);
                    let plan = plan_corruption(model.schedule(), k, fraction, variant, vocab, plan_seed)?;
                    let corrupted = model.predict_corrupted(condition, prefix, &plan)?.probs();
                    site_kl_sum(&corrupted, &marginal, vocab)
                })
                .collect::<Result<Vec<_>>>()?;
            let (corrupted_kl, std_error) = mean_and_error(&values);
            rows.push(SurrogateRow {
                variant,
                fraction,
                samples,
                corrupted_kl,
                std_error,
                clean_kl,
            });
        }
    }
    Ok(rows)
}

/// Exposure-bias statistics at one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureRow {
    pub scale: usize,
    /// Mean `-ln p(r_k | rollout prefix, c)` over rollouts, summed over sites.
    pub rollout_nll: f64,
    /// Mean `-ln p(r_k | data prefix, c)` over the corpus.
    pub data_nll: f64,
    /// `rollout_nll - data_nll`.
    pub delta: f64,
    /// Standard error of `delta` from both sample variances.
    pub std_error: f64,
    /// Mean entropy of the model's predictive at rollout prefixes.
    pub rollout_entropy: f64,
    /// Mean entropy of the model's predictive at data prefixes.
    pub data_entropy: f64,
}

fn nll_and_entropy<P: Predictor + ?Sized>(model: &P, condition: Condition, prefix: &[TokenMap], next: &TokenMap) -> Result<(f64, f64)> {
    let vocab = model.vocab();
    let probs = model.site_probs(condition, prefix)?;
    let mut nll = 0.0;
    let mut entropy = 0.0;
    for (s, site) in probs.chunks(vocab).enumerate() {
        nll -= site[next.ids[s] as usize].ln();
        entropy -= site.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    Ok((nll, entropy))
}

/// `Delta_k = E_rollout[-ln p(r_k | r^_<k, c)] - E_data[-ln p(r_k | r_<k, c)]`
/// under the model's unguided conditional, estimated from `rollouts` guided
/// rollouts and the corpus. Rollout `i` uses the condition of corpus item
/// `i mod |corpus|` and sampler seed `derive(sampler.seed, [i])`.
pub fn exposure_gap<P: Predictor + ?Sized>(
    model: &P,
    corpus: &Corpus,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    rollouts: usize,
) -> Result<Vec<ExposureRow>> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("exposure gap needs a non-empty corpus".into()));
    }
    if rollouts == 0 {
        return Err(Error::InvalidInput("exposure gap needs at least one rollout".into()));
    }
    let schedule = model.schedule();
    corpus.validate(schedule, model.vocab(), model.classes())?;
    let scales = schedule.len();
    let mut data = vec![(Vec::new(), Vec::new()); scales];
    for item in &corpus.items {
        let c = Condition::Class(item.condition);
        for (k, slot) in data.iter_mut().enumerate() {
            let (nll, h) = nll_and_entropy(model, c, &item.maps[..k], &item.maps[k])?;
            slot.0.push(nll);
            slot.1.push(h);
        }
    }
    let mut gen = vec![(Vec::new(), Vec::new()); scales];
    for i in 0..rollouts {
        let c = Condition::Class(corpus.items[i % corpus.len()].condition);
        let config = SamplerConfig {
            seed: crate::seed::derive(sampler.seed, &[i as u64]),
            ..sampler.clone()
        };
        let maps: Vec<TokenMap> = generate(model, c, guidance, &config)?
            .into_iter()
            .map(|s| s.map)
            .collect();
        for k in 0..scales {
            let (nll, h) = nll_and_entropy(model, c, &maps[..k], &maps[k])?;
            gen[k].0.push(nll);
            gen[k].1.push(h);
        }
    }
    Ok((0..scales)
        .map(|k| {
            let (rollout_nll, se_r) = mean_and_error(&gen[k].0);
            let (data_nll, se_d) = mean_and_error(&data[k].0);
            ExposureRow {
                scale: k,
                rollout_nll,
                data_nll,
                delta: rollout_nll - data_nll,
                std_error: (se_r * se_r + se_d * se_d).sqrt(),
                rollout_entropy: mean_and_error(&gen[k].1).0,
                data_entropy: mean_and_error(&data[k].1).0,
            }
        })
        .collect())
}

/// Draws `size` unguided, untruncated sequences from `model`; item `i` has
/// class `i mod C` and seed `derive(seed, [i])`.
pub fn model_corpus<P: Predictor + ?Sized>(model: &P, size: usize, seed: u64) -> Result<Corpus> {
    let classes = model.classes();
    let items = (0..size)
        .map(|i| {
            let condition = (i % classes) as u32;
            let sampler = SamplerConfig::untruncated(crate::seed::derive(seed, &[i as u64]));
            let maps = generate(model, Condition::Class(condition), &GuidanceConfig::unguided(), &sampler)?
                .into_iter()
                .map(|s| s.map)
                .collect();
            Ok(CorpusItem { condition, maps })
        })
        .collect::<Result<_>>()?;
    Ok(Corpus { items })
}
