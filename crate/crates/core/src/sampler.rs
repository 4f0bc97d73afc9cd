//! Truncated categorical sampling and the coarse-to-fine generation loop.
//!
//! Per site the order is: divide logits by the temperature, keep the `top_k`
//! most probable tokens, renormalise, keep the smallest prefix of the
//! descending-probability order whose cumulative mass reaches `top_p`
//! (the boundary token included), renormalise, draw. Ties in probability are
//! ordered by lower token id first. Guidance is applied before truncation.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use serde::{Deserialize, Serialize};

use crate::corruption::{plan_corruption, CorruptionPlan};
use crate::error::{Error, Result};
use crate::guidance::{guided_step, guided_step_with_plan, BranchLogits, GuidanceConfig, ReferenceMode};
use crate::model::{softmax, Condition, LogitGrid, Predictor, ENUMERATION_CAP};
use crate::seed::Rng;
use crate::tokenizer::{Image, Latent, TokenId, TokenMap, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "SamplerConfig::default_temperature")]
    pub temperature: f64,
    /// Clamped to the vocabulary size; `None` keeps every token.
    #[serde(default = "SamplerConfig::default_top_k")]
    pub top_k: Option<usize>,
    #[serde(default = "SamplerConfig::default_top_p")]
    pub top_p: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerConfig {
    fn default_temperature() -> f64 {
        1.0
    }

    fn default_top_k() -> Option<usize> {
        Some(900)
    }

    fn default_top_p() -> f64 {
        0.96
    }

    /// Temperature 1 with no truncation.
    pub fn untruncated(seed: u64) -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: 1.0,
            seed,
        }
    }

    /// Argmax decoding.
    pub fn greedy(seed: u64) -> Self {
        Self {
            top_k: Some(1),
            ..Self::untruncated(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: Self::default_temperature(),
            top_k: Self::default_top_k(),
            top_p: Self::default_top_p(),
            seed: 0,
        }
    }
}

/// Sampling law for one site after temperature and truncation.
pub fn truncated_distribution(logits: &[f64], config: &SamplerConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if logits.is_empty() || logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::Degenerate("logits must be finite or -inf".into()));
    }
    if logits.iter().all(|&l| l == f64::NEG_INFINITY) {
        return Err(Error::Degenerate("every logit is -inf".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / config.temperature).collect();
    let probs = softmax(&scaled);
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if let Some(k) = config.top_k {
        order.truncate(k.max(1));
    }
    if config.top_p < 1.0 {
        let z: f64 = order.iter().map(|&i| probs[i]).sum();
        let mut cum = 0.0;
        let mut keep = order.len();
        for (n, &i) in order.iter().enumerate() {
            cum += probs[i] / z;
            if cum >= config.top_p - 1e-12 {
                keep = n + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let z: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order {
        out[i] = probs[i] / z;
    }
    Ok(out)
}

/// Draws from a site law; a single-point law consumes no randomness.
pub fn sample_site(law: &[f64], rng: &mut Rng) -> Result<TokenId> {
    let mut support = law.iter().enumerate().filter(|(_, &p)| p > 0.0);
    let first = support
        .next()
        .ok_or_else(|| Error::Degenerate("empty support".into()))?;
    if support.next().is_none() {
        return Ok(first.0 as TokenId);
    }
    let dist = WeightedIndex::new(law).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(dist.sample(rng) as TokenId)
}

/// Samples every site of a logit grid independently.
pub fn truncate_and_sample(logits: &LogitGrid, config: &SamplerConfig, rng: &mut Rng) -> Result<TokenMap> {
    let ids = (0..logits.sites())
        .map(|s| sample_site(&truncated_distribution(logits.site(s), config)?, rng))
        .collect::<Result<_>>()?;
    TokenMap::new(logits.scale, logits.height, logits.width, ids)
}

/// Everything recorded for one generated scale.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub scale: usize,
    pub branches: BranchLogits,
    pub logits: LogitGrid,
    pub plan: Option<CorruptionPlan>,
    pub evaluations: usize,
    pub map: TokenMap,
}

/// Full record of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub condition: Condition,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub latent: Latent,
    pub image: Image,
}

impl Trace {
    pub fn maps(&self) -> Vec<TokenMap> {
        self.steps.iter().map(|s| s.map.clone()).collect()
    }

    pub fn plans(&self) -> Vec<CorruptionPlan> {
        self.steps.iter().filter_map(|s| s.plan.clone()).collect()
    }

    pub fn evaluations(&self) -> usize {
        self.steps.iter().map(|s| s.evaluations).sum()
    }
}

fn check_tokenizer<P: Predictor + ?Sized>(predictor: &P, tokenizer: &Tokenizer) -> Result<()> {
    if predictor.schedule() != &tokenizer.schedule || predictor.vocab() != tokenizer.vocab() {
        return Err(Error::Config("model and tokenizer disagree on schedule or vocabulary".into()));
    }
    Ok(())
}

/// Generates `r_0..r_{K-1}` coarse to fine. Token draws use the stream
/// derived from `(sampler.seed, 0)` and corruption plans the stream
/// `(sampler.seed, 1)`, so switching guidance on or off never shifts the
/// token stream.
pub fn generate<P: Predictor + ?Sized>(
    predictor: &P,
    condition: Condition,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
) -> Result<Vec<StepRecord>> {
    sampler.validate()?;
    guidance.validate(predictor.schedule().len())?;
    condition.validate(predictor.classes())?;
    let mut token_rng = crate::seed::derived_rng(sampler.seed, &[0]);
    let mut plan_rng = crate::seed::derived_rng(sampler.seed, &[1]);
    let mut maps: Vec<TokenMap> = Vec::with_capacity(predictor.schedule().len());
    let mut steps = Vec::with_capacity(predictor.schedule().len());
    for _ in 0..predictor.schedule().len() {
        let step = guided_step(predictor, condition, &maps, guidance, &mut plan_rng)?;
        let map = truncate_and_sample(&step.logits, sampler, &mut token_rng)?;
        maps.push(map.clone());
        steps.push(StepRecord {
            scale: step.logits.scale,
            branches: step.branches,
            logits: step.logits,
            plan: step.plan,
            evaluations: step.evaluations,
            map,
        });
    }
    Ok(steps)
}

/// [`generate`], then accumulate the latent and decode.
pub fn rollout<P: Predictor + ?Sized>(
    predictor: &P,
    condition: Condition,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    tokenizer: &Tokenizer,
) -> Result<Trace> {
    check_tokenizer(predictor, tokenizer)?;
    let steps = generate(predictor, condition, guidance, sampler)?;
    let maps: Vec<TokenMap> = steps.iter().map(|s| s.map.clone()).collect();
    let latent = tokenizer.latent_of(&maps)?;
    let image = tokenizer.decode(&latent);
    Ok(Trace {
        condition,
        seed: sampler.seed,
        steps,
        latent,
        image,
    })
}

/// Recomputes the guided logits of every recorded step from the recorded
/// prefix and corruption plan.
pub fn replay<P: Predictor + ?Sized>(
    predictor: &P,
    condition: Condition,
    guidance: &GuidanceConfig,
    maps: &[TokenMap],
    plans: &[Option<CorruptionPlan>],
) -> Result<Vec<LogitGrid>> {
    if plans.len() != maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} recorded plans for {} steps",
            plans.len(),
            maps.len()
        )));
    }
    (0..maps.len())
        .map(|k| Ok(guided_step_with_plan(predictor, condition, &maps[..k], guidance, plans[k].clone())?.logits))
        .collect()
}

/// Whether replaying `trace` reproduces its logits bit for bit.
pub fn replays_exactly<P: Predictor + ?Sized>(predictor: &P, guidance: &GuidanceConfig, trace: &Trace) -> Result<bool> {
    let plans: Vec<_> = trace.steps.iter().map(|s| s.plan.clone()).collect();
    let logits = replay(predictor, trace.condition, guidance, &trace.maps(), &plans)?;
    Ok(logits
        .iter()
        .zip(&trace.steps)
        .all(|(a, s)| a.data.iter().zip(&s.logits.data).all(|(x, y)| x.to_bits() == y.to_bits())))
}

/// Exact law of complete token sequences (flattened, coarse to fine).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceLaw {
    pub probs: BTreeMap<Vec<TokenId>, f64>,
}

impl SequenceLaw {
    pub fn probability(&self, sequence: &[TokenId]) -> f64 {
        self.probs.get(sequence).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Exact law of [`rollout`]'s output by forward enumeration, truncation included.
///
/// A corrupted reference makes the law depend on random plans; it is only
/// well-defined here with `plan_seed`, which fixes the plan for scale `k` to
/// the one drawn from `derive(plan_seed, [k])` for every prefix.
pub fn rollout_distribution<P: Predictor + ?Sized>(
    predictor: &P,
    condition: Condition,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    plan_seed: Option<u64>,
) -> Result<SequenceLaw> {
    sampler.validate()?;
    let schedule = predictor.schedule();
    guidance.validate(schedule.len())?;
    condition.validate(predictor.classes())?;
    let vocab = predictor.vocab();
    let count = u32::try_from(schedule.total_sites())
        .ok()
        .and_then(|n| (vocab as u128).checked_pow(n))
        .unwrap_or(u128::MAX);
    if count > ENUMERATION_CAP {
        return Err(Error::TooLarge {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    let mut plans = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let stochastic = guidance.vpg_active(k) && guidance.reference == ReferenceMode::Corrupted;
        plans.push(match (stochastic, plan_seed) {
            (false, _) => None,
            (true, Some(seed)) => Some(plan_corruption(
                schedule,
                k,
                guidance.corruption_fraction,
                guidance.variant,
                vocab,
                crate::seed::derive(seed, &[k as u64]),
            )?),
            (true, None) => {
                return Err(Error::IllDefinedLaw(
                    "corrupted-prefix guidance draws a random plan per step; fix a plan seed or use the exact_marginal reference".into(),
                ))
            }
        });
    }
    let mut level: Vec<(Vec<TokenMap>, f64)> = vec![(Vec::new(), 1.0)];
    for (k, plan) in plans.iter().enumerate() {
        let mut next = Vec::new();
        for (prefix, mass) in level {
            let step = guided_step_with_plan(predictor, condition, &prefix, guidance, plan.clone())?;
            let laws = (0..step.logits.sites())
                .map(|s| truncated_distribution(step.logits.site(s), sampler))
                .collect::<Result<Vec<_>>>()?;
            let mut partial: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), mass)];
            for law in &laws {
                partial = partial
                    .into_iter()
                    .flat_map(|(ids, m)| {
                        law.iter().enumerate().filter(|(_, &p)| p > 0.0).map(move |(v, &p)| {
                            let mut ids = ids.clone();
                            ids.push(v as TokenId);
                            (ids, m * p)
                        })
                    })
                    .collect();
            }
            let (h, w) = schedule.dims(k);
            for (ids, m) in partial {
                let mut extended = prefix.clone();
                extended.push(TokenMap::new(k, h, w, ids)?);
                next.push((extended, m));
            }
        }
        level = next;
    }
    let probs = level
        .into_iter()
        .map(|(maps, m)| (crate::tokenizer::flatten_prefix(&maps), m))
        .collect();
    Ok(SequenceLaw { probs })
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn split(text: &str) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|t| t.parse().map_err(|_| Error::InvalidInput(format!("bad logit '{t}'"))))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    step: usize,
    site: usize,
    token: TokenId,
    logits: String,
    c_gen: String,
    null_gen: String,
    c_corr: String,
    null_corr: String,
}

/// Writes one row per `(step, site)` with columns
/// `step,site,token,logits,c_gen,null_gen,c_corr,null_corr`. Logit vectors
/// are `;`-joined shortest round-trip decimals; branch columns stay empty
/// unless `branches` is set (or the branch was not evaluated).
pub fn write_trace_csv<W: Write>(writer: W, trace: &Trace, branches: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for step in &trace.steps {
        for (s, &token) in step.map.ids.iter().enumerate() {
            let cell = |g: Option<&LogitGrid>| match g {
                Some(g) if branches => join(g.site(s)),
                _ => String::new(),
            };
            out.serialize(TraceRecord {
                step: step.scale,
                site: s,
                token,
                logits: join(step.logits.site(s)),
                c_gen: cell(Some(&step.branches.cond_gen)),
                null_gen: cell(step.branches.null_gen.as_ref()),
                c_corr: cell(step.branches.cond_corr.as_ref()),
                null_corr: cell(step.branches.null_corr.as_ref()),
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Token maps and guided logits read back from [`write_trace_csv`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedTrace {
    pub maps: Vec<TokenMap>,
    pub logits: Vec<LogitGrid>,
}

pub fn read_trace_csv<R: Read>(reader: R, schedule: &crate::tokenizer::ScaleSchedule) -> Result<RecordedTrace> {
    let mut input = csv::Reader::from_reader(reader);
    let mut ids: Vec<Vec<TokenId>> = Vec::new();
    let mut logits: Vec<Vec<f64>> = Vec::new();
    let mut vocab = None;
    for record in input.deserialize::<TraceRecord>() {
        let r = record?;
        if r.step >= schedule.len() || r.step > ids.len() {
            return Err(Error::InvalidInput(format!("trace row for unexpected step {}", r.step)));
        }
        if r.step == ids.len() {
            ids.push(Vec::new());
            logits.push(Vec::new());
        }
        if r.site != ids[r.step].len() {
            return Err(Error::InvalidInput(format!("trace rows out of order at step {}", r.step)));
        }
        let row = split(&r.logits)?;
        if *vocab.get_or_insert(row.len()) != row.len() {
            return Err(Error::ShapeMismatch("trace logit rows differ in length".into()));
        }
        ids[r.step].push(r.token);
        logits[r.step].extend(row);
    }
    let vocab = vocab.unwrap_or(0);
    let mut maps = Vec::with_capacity(ids.len());
    let mut grids = Vec::with_capacity(ids.len());
    for (k, (ids, data)) in ids.into_iter().zip(logits).enumerate() {
        let (h, w) = schedule.dims(k);
        maps.push(TokenMap::new(k, h, w, ids)?);
        grids.push(LogitGrid::new(k, h, w, vocab, data)?);
    }
    Ok(RecordedTrace { maps, logits: grids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;
    use crate::tokenizer::{Codebook, Decoder, ScaleSchedule};

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    fn m1_tokenizer() -> Tokenizer {
        let schedule = ScaleSchedule::new(vec![(1, 1), (1, 1)]).unwrap();
        let book = Codebook::from_tables(vec![vec![vec![0.0], vec![1.0]], vec![vec![0.0], vec![0.5]]]).unwrap();
        Tokenizer::new(schedule, book, Decoder::Identity).unwrap()
    }

    #[test]
    fn top_p_keeps_boundary_token() {
        let config = SamplerConfig {
            top_p: 0.7,
            ..SamplerConfig::untruncated(0)
        };
        let law = truncated_distribution(&ln(&[0.5, 0.3, 0.2]), &config).unwrap();
        assert!((law[0] - 0.625).abs() < 1e-12 && (law[1] - 0.375).abs() < 1e-12);
        assert_eq!(law[2], 0.0);
    }

    #[test]
    fn no_truncation_is_identity() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let config = SamplerConfig {
            top_k: Some(4),
            ..SamplerConfig::untruncated(0)
        };
        let law = truncated_distribution(&ln(&p), &config).unwrap();
        for (a, b) in law.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let config = SamplerConfig {
            top_k: Some(1),
            ..SamplerConfig::untruncated(0)
        };
        assert_eq!(truncated_distribution(&[0.0, 1.0, 1.0], &config).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn greedy_uses_no_randomness() {
        let mut rng = crate::seed::rng(3);
        let before = rng.clone();
        let law = truncated_distribution(&[0.1, 2.0, 0.3], &SamplerConfig::greedy(0)).unwrap();
        assert_eq!(sample_site(&law, &mut rng).unwrap(), 1);
        assert_eq!(rng, before);
    }

    #[test]
    fn all_negative_infinity_is_degenerate() {
        let err = truncated_distribution(&[f64::NEG_INFINITY; 3], &SamplerConfig::untruncated(0));
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn greedy_m1_rollout() {
        let m = fixtures::m1();
        let trace = rollout(&m, Condition::Class(0), &GuidanceConfig::unguided(), &SamplerConfig::greedy(0), &m1_tokenizer()).unwrap();
        assert_eq!(trace.maps().iter().map(|m| m.ids[0]).collect::<Vec<_>>(), vec![0, 0]);
        assert_eq!(trace.evaluations(), 2);
    }

    #[test]
    fn unguided_law_is_the_model_chain() {
        let m = fixtures::m1();
        let law = rollout_distribution(&m, Condition::Class(0), &GuidanceConfig::unguided(), &SamplerConfig::untruncated(0), None).unwrap();
        assert!((law.probability(&[0, 0]) - 0.45).abs() < 1e-15);
        assert!((law.probability(&[1, 1]) - 0.2).abs() < 1e-15);
        assert!((law.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guided_law_with_exact_reference() {
        let m = fixtures::m1();
        let guidance = GuidanceConfig {
            vpg_scale: 1.0,
            reference: ReferenceMode::ExactMarginal,
            ..GuidanceConfig::default()
        };
        let law = rollout_distribution(&m, Condition::Class(0), &guidance, &SamplerConfig::untruncated(0), None).unwrap();
        // r1 = 0: [0.72, 0.32] / 1.04; r1 = 1: [0.08, 1.28] / 1.36
        assert!((law.probability(&[0, 0]) - 0.75 * 0.72 / 1.04).abs() < 1e-12);
        assert!((law.probability(&[1, 1]) - 0.25 * 1.28 / 1.36).abs() < 1e-12);
    }

    #[test]
    fn corrupted_reference_without_plan_seed_is_ill_defined() {
        let m = fixtures::m1();
        let guidance = GuidanceConfig {
            vpg_scale: 1.0,
            ..GuidanceConfig::default()
        };
        let err = rollout_distribution(&m, Condition::Class(0), &guidance, &SamplerConfig::untruncated(0), None);
        assert!(matches!(err, Err(Error::IllDefinedLaw(_))));
    }

    #[test]
    fn trace_csv_round_trip_preserves_bits() {
        let m = fixtures::m1();
        let guidance = GuidanceConfig {
            cfg_scale: 1.3,
            vpg_scale: 0.7,
            reference: ReferenceMode::ExactMarginal,
            ..GuidanceConfig::default()
        };
        let trace = rollout(&m, Condition::Class(1), &guidance, &SamplerConfig::untruncated(5), &m1_tokenizer()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace, true).unwrap();
        let back = read_trace_csv(buf.as_slice(), m.schedule()).unwrap();
        assert_eq!(back.maps, trace.maps());
        for (a, s) in back.logits.iter().zip(&trace.steps) {
            assert_eq!(a, &s.logits);
        }
        assert!(replays_exactly(&m, &guidance, &trace).unwrap());
    }
}
