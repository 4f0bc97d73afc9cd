//! Brute-force ground truth on enumerable models.
//!
//! Everything here is computed by summing over every token prefix (and, for
//! joint targets, every token map), with no reference to the logit-space
//! guidance rules. The guidance module's extrapolations are checked against
//! these quantities by [`verify_identities`].
//!
//! Condition posteriors use a uniform prior over classes. Multi-site scales
//! are handled per site ([`Target::Site`]): the site's augmented distribution
//! is built from the per-site marginal of the prefix-marginalised predictive.
//! On single-site scales this coincides with the joint ([`Target::Joint`]).

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{cfg_combine, compose_cfg_vpg, vpg_combine, BranchLogits};
use crate::model::{softmax, Condition, LogitGrid, Predictor, ENUMERATION_CAP};
use crate::tokenizer::{unflatten_prefix, TokenId, TokenMap};

/// Probability vector over an enumerated outcome space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    /// Normalises non-negative weights.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        let z: f64 = weights.iter().sum();
        if !(z > 0.0) || !z.is_finite() || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Degenerate(format!("cannot normalise weights with total {z}")));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / z).collect(),
        })
    }

    /// Softmax of log-weights.
    pub fn from_log_weights(logw: &[f64]) -> Result<Self> {
        if logw.iter().all(|&l| l == f64::NEG_INFINITY) || logw.iter().any(|l| l.is_nan()) {
            return Err(Error::Degenerate("no finite log-weight".into()));
        }
        Ok(Self { probs: softmax(logw) })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// KL(p || q) in nats; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Which outcome space an augmented distribution lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Whole next map; outcomes are maps in mixed-radix order, first site most significant.
    Joint,
    /// One site of the next map; outcomes are token ids.
    Site(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Joint => f.write_str("joint"),
            Target::Site(s) => write!(f, "{s}"),
        }
    }
}

fn checked_count(vocab: usize, sites: usize) -> Result<usize> {
    let count = u32::try_from(sites)
        .ok()
        .and_then(|s| (vocab as u128).checked_pow(s))
        .unwrap_or(u128::MAX);
    if count > ENUMERATION_CAP {
        return Err(Error::TooLarge {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    Ok(count as usize)
}

/// Decodes index `i` of a mixed-radix enumeration into `len` digits.
fn digits(mut i: usize, vocab: usize, len: usize) -> Vec<TokenId> {
    let mut out = vec![0; len];
    for d in out.iter_mut().rev() {
        *d = (i % vocab) as TokenId;
        i /= vocab;
    }
    out
}

/// Every prefix for scale `k` with its probability `p(r_<k | condition)`,
/// obtained by chaining the model's own predictions. Prefixes are listed in
/// mixed-radix order of their flattened ids, first id most significant.
pub fn enumerate_prefixes<P: Predictor + ?Sized>(p: &P, condition: Condition, k: usize) -> Result<Vec<(Vec<TokenMap>, f64)>> {
    let schedule = p.schedule();
    if k >= schedule.len() {
        return Err(Error::InvalidInput(format!("no scale {k} in a {}-scale schedule", schedule.len())));
    }
    let vocab = p.vocab();
    checked_count(vocab, schedule.prefix_sites(k))?;
    let mut level: Vec<(Vec<TokenMap>, f64)> = vec![(Vec::new(), 1.0)];
    for j in 0..k {
        let (h, w) = schedule.dims(j);
        let maps = checked_count(vocab, h * w)?;
        let mut next = Vec::with_capacity(level.len() * maps);
        for (prefix, mass) in level {
            let probs = p.site_probs(condition, &prefix)?;
            for m in 0..maps {
                let ids = digits(m, vocab, h * w);
                let pm: f64 = ids
                    .iter()
                    .enumerate()
                    .map(|(s, &id)| probs[s * vocab + id as usize])
                    .product();
                let mut extended = prefix.clone();
                extended.push(TokenMap::new(j, h, w, ids)?);
                next.push((extended, mass * pm));
            }
        }
        level = next;
    }
    Ok(level)
}

/// Per-condition tables for one scale: prefix masses and the model's
/// per-site predictions under every prefix.
struct ConditionTable {
    prior: Vec<f64>,
    cond: Vec<Vec<f64>>,
}

impl ConditionTable {
    fn build<P: Predictor + ?Sized>(p: &P, condition: Condition, k: usize) -> Result<(Vec<Vec<TokenMap>>, Self)> {
        let listed = enumerate_prefixes(p, condition, k)?;
        let mut prefixes = Vec::with_capacity(listed.len());
        let mut prior = Vec::with_capacity(listed.len());
        let mut cond = Vec::with_capacity(listed.len());
        for (prefix, mass) in listed {
            cond.push(p.site_probs(condition, &prefix)?);
            prefixes.push(prefix);
            prior.push(mass);
        }
        Ok((prefixes, Self { prior, cond }))
    }
}

/// Enumerated view of one scale of a model: prefixes, per-class tables and
/// outcome helpers. Built once and queried many times.
pub struct ScaleOracle {
    k: usize,
    vocab: usize,
    sites: usize,
    prefixes: Vec<Vec<TokenMap>>,
    classes: Vec<ConditionTable>,
    /// Per class, `sites x vocab` marginals.
    site_marg: Vec<Vec<f64>>,
}

impl ScaleOracle {
    pub fn new<P: Predictor + ?Sized>(p: &P, k: usize) -> Result<Self> {
        let mut prefixes = Vec::new();
        let mut classes = Vec::with_capacity(p.classes());
        for c in 0..p.classes() as u32 {
            let (listed, table) = ConditionTable::build(p, Condition::Class(c), k)?;
            prefixes = listed;
            classes.push(table);
        }
        Ok(Self::assemble(k, p.vocab(), p.schedule().sites(k), prefixes, classes))
    }

    fn assemble(k: usize, vocab: usize, sites: usize, prefixes: Vec<Vec<TokenMap>>, classes: Vec<ConditionTable>) -> Self {
        let site_marg = classes
            .iter()
            .map(|t| {
                let mut out = vec![0.0; sites * vocab];
                for (mass, probs) in t.prior.iter().zip(&t.cond) {
                    for (o, q) in out.iter_mut().zip(probs) {
                        *o += mass * q;
                    }
                }
                out
            })
            .collect();
        Self {
            k,
            vocab,
            sites,
            prefixes,
            classes,
            site_marg,
        }
    }

    pub fn scale(&self) -> usize {
        self.k
    }

    pub fn prefixes(&self) -> &[Vec<TokenMap>] {
        &self.prefixes
    }

    fn class_index(&self, condition: Condition) -> Result<usize> {
        match condition {
            Condition::Class(c) if (c as usize) < self.classes.len() => Ok(c as usize),
            other => Err(Error::InvalidInput(format!(
                "the oracle needs a class condition, got {other}"
            ))),
        }
    }

    /// Position of `prefix` in the enumeration.
    pub fn prefix_index(&self, prefix: &[TokenMap]) -> Result<usize> {
        if prefix.len() != self.k {
            return Err(Error::InvalidInput(format!(
                "prefix of {} scales for scale {}",
                prefix.len(),
                self.k
            )));
        }
        let mut index = 0usize;
        for map in prefix {
            for &id in &map.ids {
                if id as usize >= self.vocab {
                    return Err(Error::InvalidToken { id, vocab: self.vocab });
                }
                index = index * self.vocab + id as usize;
            }
        }
        if index >= self.prefixes.len() || self.prefixes[index] != prefix {
            return Err(Error::InvalidInput("prefix does not match the schedule".into()));
        }
        Ok(index)
    }

    fn outcomes(&self, target: Target) -> Result<usize> {
        match target {
            Target::Joint => checked_count(self.vocab, self.sites),
            Target::Site(s) if s < self.sites => Ok(self.vocab),
            Target::Site(s) => Err(Error::InvalidInput(format!(
                "site {s} outside scale {} with {} sites",
                self.k, self.sites
            ))),
        }
    }

    /// Outcome probabilities under one prefix.
    fn target_cond(&self, site_probs: &[f64], target: Target) -> Result<Vec<f64>> {
        let v = self.vocab;
        Ok(match target {
            Target::Site(s) => site_probs[s * v..(s + 1) * v].to_vec(),
            Target::Joint => (0..self.outcomes(target)?)
                .map(|m| {
                    digits(m, v, self.sites)
                        .iter()
                        .enumerate()
                        .map(|(s, &id)| site_probs[s * v + id as usize])
                        .product()
                })
                .collect(),
        })
    }

    /// Prefix-marginalised outcome probabilities for class `c`.
    fn target_marginal(&self, c: usize, target: Target) -> Result<Vec<f64>> {
        if let Target::Site(s) = target {
            self.outcomes(target)?;
            return Ok(self.site_marg[c][s * self.vocab..(s + 1) * self.vocab].to_vec());
        }
        let table = &self.classes[c];
        let mut out = vec![0.0; self.outcomes(target)?];
        for (mass, probs) in table.prior.iter().zip(&table.cond) {
            for (o, q) in out.iter_mut().zip(self.target_cond(probs, target)?) {
                *o += mass * q;
            }
        }
        Ok(out)
    }

    /// `p(r_k | c)` over the chosen outcome space.
    pub fn marginal(&self, condition: Condition, target: Target) -> Result<Distribution> {
        Ok(Distribution {
            probs: self.target_marginal(self.class_index(condition)?, target)?,
        })
    }

    /// `p(r_k | c)` per site, `sites x vocab`.
    pub fn site_marginals(&self, condition: Condition) -> Result<Vec<f64>> {
        Ok(self.site_marg[self.class_index(condition)?].clone())
    }

    /// `p(r_<k | r_k, c)` for every prefix, for a complete next map.
    pub fn posterior(&self, condition: Condition, next: &TokenMap) -> Result<Vec<f64>> {
        let c = self.class_index(condition)?;
        let index = next
            .ids
            .iter()
            .try_fold(0usize, |acc, &id| {
                if (id as usize) < self.vocab {
                    Ok(acc * self.vocab + id as usize)
                } else {
                    Err(Error::InvalidToken { id, vocab: self.vocab })
                }
            })?;
        if next.ids.len() != self.sites {
            return Err(Error::ShapeMismatch(format!(
                "next map has {} sites, scale {} has {}",
                next.ids.len(),
                self.k,
                self.sites
            )));
        }
        let table = &self.classes[c];
        let joint = table
            .prior
            .iter()
            .zip(&table.cond)
            .map(|(mass, probs)| Ok(mass * self.target_cond(probs, Target::Joint)?[index]))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Distribution::normalized(joint)?.probs)
    }

    /// `p(r_k | prefix, c) p(prefix | r_k, c)^lambda`, normalised.
    pub fn augmented_vpg(&self, condition: Condition, prefix: usize, lambda: f64, target: Target) -> Result<Distribution> {
        let c = self.class_index(condition)?;
        let table = &self.classes[c];
        let cond = self.target_cond(&table.cond[prefix], target)?;
        let marginal = self.target_marginal(c, target)?;
        let prior = table.prior[prefix];
        let logw: Vec<f64> = cond
            .iter()
            .zip(&marginal)
            .map(|(&q, &m)| {
                let posterior = q * prior / m;
                q.ln() + if lambda == 0.0 { 0.0 } else { lambda * posterior.ln() }
            })
            .collect();
        Distribution::from_log_weights(&logw)
    }

    /// `ln p(c | prefix, r_k)` for every outcome, uniform class prior.
    fn log_class_posterior(&self, c: usize, prefix: usize, target: Target) -> Result<Vec<f64>> {
        let joint = self
            .classes
            .iter()
            .map(|t| {
                Ok(self
                    .target_cond(&t.cond[prefix], target)?
                    .into_iter()
                    .map(|q| q * t.prior[prefix])
                    .collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let outcomes = joint[c].len();
        Ok((0..outcomes)
            .map(|r| {
                let total: f64 = joint.iter().map(|row| row[r]).sum();
                (joint[c][r] / total).ln()
            })
            .collect())
    }

    /// `p(r_k | prefix, c) p(c | prefix, r_k)^gamma`, normalised.
    pub fn augmented_cfg(&self, condition: Condition, prefix: usize, gamma: f64, target: Target) -> Result<Distribution> {
        let c = self.class_index(condition)?;
        let cond = self.target_cond(&self.classes[c].cond[prefix], target)?;
        let post = self.log_class_posterior(c, prefix, target)?;
        let logw: Vec<f64> = cond
            .iter()
            .zip(&post)
            .map(|(&q, &lp)| q.ln() + if gamma == 0.0 { 0.0 } else { gamma * lp })
            .collect();
        Distribution::from_log_weights(&logw)
    }

    /// CFG applied to the exact reference branch:
    /// `p(r_k | c) p(c | r_k)^gamma` with `p(c | r_k)` from the prefix marginals.
    pub fn guided_reference(&self, condition: Condition, gamma: f64, target: Target) -> Result<Distribution> {
        let c = self.class_index(condition)?;
        let marginals = (0..self.classes.len())
            .map(|i| self.target_marginal(i, target))
            .collect::<Result<Vec<_>>>()?;
        let logw: Vec<f64> = (0..marginals[c].len())
            .map(|r| {
                let total: f64 = marginals.iter().map(|m| m[r]).sum();
                let lp = (marginals[c][r] / total).ln();
                marginals[c][r].ln() + if gamma == 0.0 { 0.0 } else { gamma * lp }
            })
            .collect();
        Distribution::from_log_weights(&logw)
    }

    /// `P1 (P1 / P2)^lambda` with `P1` the CFG-augmented conditional under the
    /// prefix and `P2` the CFG-augmented exact reference.
    pub fn augmented_composed(
        &self,
        condition: Condition,
        prefix: usize,
        gamma: f64,
        lambda: f64,
        target: Target,
    ) -> Result<Distribution> {
        let p1 = self.augmented_cfg(condition, prefix, gamma, target)?;
        let p2 = self.guided_reference(condition, gamma, target)?;
        let logw: Vec<f64> = p1
            .probs
            .iter()
            .zip(&p2.probs)
            .map(|(&a, &b)| a.ln() + if lambda == 0.0 { 0.0 } else { lambda * (a.ln() - b.ln()) })
            .collect();
        Distribution::from_log_weights(&logw)
    }
}

/// `p(r_k | c)` over complete next maps.
pub fn prefix_marginal<P: Predictor + ?Sized>(p: &P, condition: Condition, k: usize) -> Result<Distribution> {
    match condition {
        Condition::Null => {
            let (prefixes, table) = ConditionTable::build(p, condition, k)?;
            ScaleOracle::assemble(k, p.vocab(), p.schedule().sites(k), prefixes, vec![table]).marginal(Condition::Class(0), Target::Joint)
        }
        c => ScaleOracle::new(p, k)?.marginal(c, Target::Joint),
    }
}

/// Per-site marginals of `p(r_k | c)`, `sites x vocab`; for `Null`, the
/// uniform mixture of the class marginals.
pub fn site_marginals<P: Predictor + ?Sized>(p: &P, condition: Condition, k: usize) -> Result<Vec<f64>> {
    let oracle = ScaleOracle::new(p, k)?;
    match condition {
        Condition::Class(_) => oracle.site_marginals(condition),
        Condition::Null => {
            let classes = p.classes();
            let mut out = vec![0.0; oracle.sites * oracle.vocab];
            for c in 0..classes as u32 {
                for (o, q) in out.iter_mut().zip(oracle.site_marginals(Condition::Class(c))?) {
                    *o += q / classes as f64;
                }
            }
            Ok(out)
        }
    }
}

/// Log of [`site_marginals`] as a logit grid.
pub fn reference_logits<P: Predictor + ?Sized>(p: &P, condition: Condition, k: usize) -> Result<LogitGrid> {
    let probs = site_marginals(p, condition, k)?;
    let (h, w) = p.schedule().dims(k);
    LogitGrid::from_probs(k, h, w, p.vocab(), &probs)
}

/// `p(r_<k | r_k, c)` for every prefix, in enumeration order.
pub fn prefix_posterior<P: Predictor + ?Sized>(p: &P, condition: Condition, next: &TokenMap) -> Result<Vec<(Vec<TokenMap>, f64)>> {
    let oracle = ScaleOracle::new(p, next.scale)?;
    let post = oracle.posterior(condition, next)?;
    Ok(oracle.prefixes.iter().cloned().zip(post).collect())
}

pub fn augmented_vpg<P: Predictor + ?Sized>(p: &P, condition: Condition, prefix: &[TokenMap], lambda: f64, target: Target) -> Result<Distribution> {
    let oracle = ScaleOracle::new(p, prefix.len())?;
    oracle.augmented_vpg(condition, oracle.prefix_index(prefix)?, lambda, target)
}

pub fn augmented_cfg<P: Predictor + ?Sized>(p: &P, condition: Condition, prefix: &[TokenMap], gamma: f64, target: Target) -> Result<Distribution> {
    let oracle = ScaleOracle::new(p, prefix.len())?;
    oracle.augmented_cfg(condition, oracle.prefix_index(prefix)?, gamma, target)
}

pub fn augmented_composed<P: Predictor + ?Sized>(
    p: &P,
    condition: Condition,
    prefix: &[TokenMap],
    gamma: f64,
    lambda: f64,
    target: Target,
) -> Result<Distribution> {
    let oracle = ScaleOracle::new(p, prefix.len())?;
    oracle.augmented_composed(condition, oracle.prefix_index(prefix)?, gamma, lambda, target)
}

/// Branch used in place of the exact marginal when checking identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IdentityReference {
    /// `log p(r_k | c)`: the identities hold exactly.
    #[default]
    ExactMarginal,
    /// The model's conditional under one seeded uniformly random prefix per
    /// `(condition, scale)`: a surrogate, so VPG identities are expected to fail.
    RandomPrefix { seed: u64 },
}

/// Strength grid for [`verify_identities`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityGrid {
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub reference: IdentityReference,
}

impl Default for IdentityGrid {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 0.5, 1.0, 3.0],
            lambdas: vec![0.0, 0.5, 1.0, 1.3, 1.8, 2.4, 3.0],
            reference: IdentityReference::ExactMarginal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Identity {
    Cfg,
    Vpg,
    CfgVpg,
}

impl fmt::Display for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Identity::Cfg => "cfg",
            Identity::Vpg => "vpg",
            Identity::CfgVpg => "cfg_vpg",
        })
    }
}

/// One checked `(identity, condition, scale, prefix, site, gamma, lambda)` tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub identity: Identity,
    pub condition: u32,
    pub scale: usize,
    /// Flattened prefix ids, space separated.
    pub prefix: String,
    pub site: String,
    pub gamma: f64,
    pub lambda: f64,
    pub max_abs_diff: f64,
    /// KL(logit rule || oracle), nats.
    pub kl: f64,
    /// KL(exact reference || reference used) at this site; zero for the exact reference.
    pub reference_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub rows: Vec<IdentityRow>,
    pub max_kl: f64,
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.kl <= self.tolerance && r.kl.is_finite())
    }

    /// Rows whose KL exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &IdentityRow> {
        self.rows.iter().filter(move |r| !(r.kl <= self.tolerance))
    }

    /// Worst row, if any.
    pub fn worst(&self) -> Option<&IdentityRow> {
        self.rows.iter().max_by(|a, b| a.kl.total_cmp(&b.kl))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn site_grid(k: usize, vocab: usize, probs: &[f64]) -> Result<LogitGrid> {
    LogitGrid::from_probs(k, 1, 1, vocab, probs)
}

fn compare(observed: &LogitGrid, oracle: &Distribution) -> (f64, f64) {
    let p = observed.probs();
    let diff = p
        .iter()
        .zip(&oracle.probs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (diff, kl_divergence(&p, &oracle.probs).max(0.0))
}

/// Checks the CFG, VPG and composed logit rules against the oracle for every
/// class, scale, prefix and site, over the strengths in `grid`.
///
/// The logit rules consume the model's conditional and null-condition rows
/// under the genuine prefix and, for the contrast branch, the configured
/// reference. Rows are produced in parallel per scale and sorted by scale,
/// condition, prefix order.
pub fn verify_identities<P: Predictor + ?Sized>(p: &P, grid: &IdentityGrid, tolerance: f64) -> Result<IdentityReport> {
    if grid.gammas.iter().chain(&grid.lambdas).any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("guidance strengths must be finite and non-negative".into()));
    }
    if !(tolerance >= 0.0) {
        return Err(Error::Config(format!("tolerance must be non-negative, got {tolerance}")));
    }
    if !p.supports_null() && grid.gammas.iter().any(|&g| g > 0.0) {
        return Err(Error::Config("cfg identities need a model with a null condition".into()));
    }
    let vocab = p.vocab();
    let mut rows = Vec::new();
    for k in 0..p.schedule().len() {
        let oracle = ScaleOracle::new(p, k)?;
        let sites = oracle.sites;
        let null_marginal = site_marginals(p, Condition::Null, k)?;
        let mut work = Vec::new();
        for c in 0..p.classes() as u32 {
            for i in 0..oracle.prefixes.len() {
                work.push((c, i));
            }
        }
        let chunk = work
            .par_iter()
            .map(|&(c, i)| -> Result<Vec<IdentityRow>> {
                let condition = Condition::Class(c);
                let prefix = &oracle.prefixes[i];
                let cond = p.site_probs(condition, prefix)?;
                let null = if p.supports_null() {
                    Some(p.site_probs(Condition::Null, prefix)?)
                } else {
                    None
                };
                let exact = oracle.site_marginals(condition)?;
                let (ref_c, ref_null) = match grid.reference {
                    IdentityReference::ExactMarginal => (exact.clone(), null_marginal.clone()),
                    IdentityReference::RandomPrefix { seed } => {
                        let surrogate = random_prefix(p, k, crate::seed::derive(seed, &[c as u64, k as u64]))?;
                        let rc = p.site_probs(condition, &surrogate)?;
                        let rn = if p.supports_null() {
                            p.site_probs(Condition::Null, &surrogate)?
                        } else {
                            rc.clone()
                        };
                        (rc, rn)
                    }
                };
                let ids = crate::tokenizer::flatten_prefix(prefix)
                    .iter()
                    .map(|id| id.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                let mut out = Vec::new();
                for s in 0..sites {
                    let at = |v: &[f64]| v[s * vocab..(s + 1) * vocab].to_vec();
                    let target = if sites == 1 { Target::Joint } else { Target::Site(s) };
                    let l_c = site_grid(k, vocab, &at(&cond))?;
                    let l_n = null.as_ref().map(|n| site_grid(k, vocab, &at(n))).transpose()?;
                    let r_c = site_grid(k, vocab, &at(&ref_c))?;
                    let r_n = site_grid(k, vocab, &at(&ref_null))?;
                    let gap = kl_divergence(&at(&exact), &at(&ref_c)).max(0.0);
                    let mut push = |identity, gamma, lambda, observed: LogitGrid, truth: Distribution, gap| {
                        let (max_abs_diff, kl) = compare(&observed, &truth);
                        out.push(IdentityRow {
                            identity,
                            condition: c,
                            scale: k,
                            prefix: ids.clone(),
                            site: if sites == 1 { "joint".into() } else { s.to_string() },
                            gamma,
                            lambda,
                            max_abs_diff,
                            kl,
                            reference_gap: gap,
                        });
                    };
                    if let Some(l_n) = &l_n {
                        for &gamma in &grid.gammas {
                            let observed = cfg_combine(&l_c, l_n, gamma)?;
                            push(Identity::Cfg, gamma, 0.0, observed, oracle.augmented_cfg(condition, i, gamma, target)?, 0.0);
                        }
                    }
                    for &lambda in &grid.lambdas {
                        let observed = vpg_combine(&l_c, &r_c, lambda)?;
                        push(Identity::Vpg, 0.0, lambda, observed, oracle.augmented_vpg(condition, i, lambda, target)?, gap);
                    }
                    if let Some(l_n) = &l_n {
                        for &gamma in &grid.gammas {
                            for &lambda in &grid.lambdas {
                                let branches = BranchLogits {
                                    cond_gen: l_c.clone(),
                                    null_gen: Some(l_n.clone()),
                                    cond_corr: Some(r_c.clone()),
                                    null_corr: Some(r_n.clone()),
                                };
                                let observed = compose_cfg_vpg(&branches, gamma, lambda)?;
                                let truth = oracle.augmented_composed(condition, i, gamma, lambda, target)?;
                                push(Identity::CfgVpg, gamma, lambda, observed, truth, gap);
                            }
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(chunk.into_iter().flatten());
    }
    let max_kl = rows.iter().map(|r| r.kl).fold(0.0, f64::max);
    let max_abs_diff = rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    Ok(IdentityReport {
        rows,
        max_kl,
        max_abs_diff,
        tolerance,
    })
}

/// A uniformly random token prefix for scale `k`.
fn random_prefix<P: Predictor + ?Sized>(p: &P, k: usize, seed: u64) -> Result<Vec<TokenMap>> {
    use rand::Rng as _;
    let mut rng = crate::seed::rng(seed);
    let ids: Vec<TokenId> = (0..p.schedule().prefix_sites(k))
        .map(|_| rng.random_range(0..p.vocab() as TokenId))
        .collect();
    unflatten_prefix(p.schedule(), &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn first_scale_has_one_empty_prefix() {
        let m = fixtures::m1();
        let listed = enumerate_prefixes(&m, Condition::Class(0), 0).unwrap();
        assert_eq!(listed.len(), 1);
        assert!(listed[0].0.is_empty());
        assert_eq!(listed[0].1, 1.0);
    }

    #[test]
    fn m1_prefix_masses_come_from_the_table() {
        let m = fixtures::m1();
        let listed = enumerate_prefixes(&m, Condition::Class(0), 1).unwrap();
        assert_eq!(listed.len(), 2);
        assert!(close(listed[0].1, 0.75, 1e-15) && close(listed[1].1, 0.25, 1e-15));
        assert_eq!(listed[1].0[0].ids, vec![1]);
    }

    #[test]
    fn m1_marginal_and_posterior() {
        let m = fixtures::m1();
        let marg = prefix_marginal(&m, Condition::Class(0), 1).unwrap();
        assert!(close(marg.probs[0], 0.5, 1e-15) && close(marg.probs[1], 0.5, 1e-15));
        let next = TokenMap::new(1, 1, 1, vec![0]).unwrap();
        let post = prefix_posterior(&m, Condition::Class(0), &next).unwrap();
        assert!(close(post[0].1, 0.9, 1e-15));
        assert!(close(post[0].1 + post[1].1, 1.0, 1e-15));
    }

    #[test]
    fn first_scale_marginal_is_the_row() {
        let m = fixtures::m1();
        let marg = prefix_marginal(&m, Condition::Class(1), 0).unwrap();
        assert_eq!(marg.probs, vec![0.5, 0.5]);
    }

    #[test]
    fn m1_augmented_vpg() {
        let m = fixtures::m1();
        let prefix = vec![TokenMap::new(0, 1, 1, vec![0]).unwrap()];
        let aug = augmented_vpg(&m, Condition::Class(0), &prefix, 1.0, Target::Joint).unwrap();
        assert!(close(aug.probs[0], 0.72 / 1.04, 1e-12));
        let zero = augmented_vpg(&m, Condition::Class(0), &prefix, 0.0, Target::Joint).unwrap();
        assert!(close(zero.probs[0], 0.6, 1e-15));
    }

    #[test]
    fn large_lambda_picks_the_likelihood_ratio_argmax() {
        let m = fixtures::m1();
        let prefix = vec![TokenMap::new(0, 1, 1, vec![1]).unwrap()];
        // p(r|r1=1,c0) = [0.2, 0.8], marginal [0.5, 0.5] -> ratio argmax 1.
        let aug = augmented_vpg(&m, Condition::Class(0), &prefix, 1e3, Target::Joint).unwrap();
        assert!(aug.probs[1] > 0.999_999);
    }

    #[test]
    fn two_class_cfg_fixture() {
        let m = fixtures::two_class_single_scale();
        let aug = augmented_cfg(&m, Condition::Class(0), &[], 1.0, Target::Joint).unwrap();
        assert!(close(aug.probs[0], 1.28 / 1.36, 1e-12));
    }

    #[test]
    fn single_class_cfg_is_inert() {
        let s = crate::tokenizer::ScaleSchedule::new(vec![(1, 1), (1, 1)]).unwrap();
        let m = crate::model::build_tabular(&s, 3, 1, 5).unwrap();
        let prefix = vec![TokenMap::new(0, 1, 1, vec![2]).unwrap()];
        let base = m.site_probs(Condition::Class(0), &prefix).unwrap();
        for gamma in [0.5, 2.0] {
            let aug = augmented_cfg(&m, Condition::Class(0), &prefix, gamma, Target::Joint).unwrap();
            for (a, b) in aug.probs.iter().zip(&base) {
                assert!(close(*a, *b, 1e-12));
            }
        }
    }

    #[test]
    fn m1_identities_hold() {
        let report = verify_identities(&fixtures::m1(), &IdentityGrid::default(), 1e-9).unwrap();
        assert!(report.passed(), "max kl {}", report.max_kl);
        assert!(!report.rows.is_empty());
    }

    #[test]
    fn surrogate_reference_breaks_vpg_identity() {
        let grid = IdentityGrid {
            gammas: vec![0.0],
            lambdas: vec![1.0],
            reference: IdentityReference::RandomPrefix { seed: 1 },
        };
        let report = verify_identities(&fixtures::m1(), &grid, 1e-9).unwrap();
        assert!(!report.passed());
        assert!(report.rows.iter().any(|r| r.reference_gap > 0.0));
    }

    #[test]
    fn zero_tolerance_reports_offending_rows() {
        let s = crate::tokenizer::ScaleSchedule::new(vec![(1, 1), (1, 2)]).unwrap();
        let m = crate::model::build_tabular(&s, 3, 2, 1).unwrap();
        let grid = IdentityGrid {
            gammas: vec![0.7],
            lambdas: vec![1.3],
            reference: IdentityReference::ExactMarginal,
        };
        assert!(verify_identities(&m, &grid, -1.0).is_err());
        let report = verify_identities(&m, &grid, 0.0).unwrap();
        assert!(!report.passed(), "rounding should leave some KL above zero");
        assert!(report.failures().all(|r| r.kl > 0.0));
        assert_eq!(
            report.failures().count(),
            report.rows.iter().filter(|r| r.kl > 0.0).count()
        );
    }

    #[test]
    fn oversized_enumeration_is_refused() {
        let s = crate::tokenizer::ScaleSchedule::new(vec![(1, 1), (4, 4), (4, 4)]).unwrap();
        struct Uniform(crate::tokenizer::ScaleSchedule);
        impl Predictor for Uniform {
            fn schedule(&self) -> &crate::tokenizer::ScaleSchedule {
                &self.0
            }
            fn vocab(&self) -> usize {
                4
            }
            fn classes(&self) -> usize {
                1
            }
            fn supports_null(&self) -> bool {
                false
            }
            fn predict(&self, _: Condition, prefix: &[TokenMap]) -> Result<LogitGrid> {
                let (h, w) = self.0.dims(prefix.len());
                LogitGrid::new(prefix.len(), h, w, 4, vec![0.0; h * w * 4])
            }
        }
        let err = enumerate_prefixes(&Uniform(s), Condition::Class(0), 2).unwrap_err();
        assert!(matches!(err, Error::TooLarge { .. }));
    }
}
