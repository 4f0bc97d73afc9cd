use rand::Rng as _;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use super::{validate_prefix, Condition, LogitGrid, Predictor, ReferenceCache, ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::tokenizer::{flatten_prefix, ScaleSchedule, TokenMap};

/// Entries of generated tables are floored here before renormalisation.
pub const PROBABILITY_FLOOR: f64 = 1e-9;

const FORMAT_VERSION: &str = "vpglab-tabular/1";

/// Exactly enumerable next-scale model.
///
/// For each class, scale and complete token prefix there is one table row
/// holding an independent categorical per site of the next map. Rows are
/// stored densely, indexed by the prefix ids read as a base-`vocab` number.
///
/// The null condition is the exact condition-marginal predictive
/// `p(r_k | r_<k) = sum_c p(c | r_<k) p(r_k | r_<k, c)` under a uniform
/// class prior, computed per site from the stored rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TabularFile", into = "TabularFile")]
pub struct TabularModel {
    schedule: ScaleSchedule,
    vocab: usize,
    classes: usize,
    seed: Option<u64>,
    /// `tables[class][scale]`: `prefixes x sites x vocab` probabilities.
    tables: Vec<Vec<Vec<f64>>>,
    reference: ReferenceCache,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularFile {
    version: String,
    seed: Option<u64>,
    schedule: ScaleSchedule,
    vocab: usize,
    classes: usize,
    tables: Vec<Vec<Vec<f64>>>,
}

/// `V^n`, or `None` on overflow.
fn checked_states(vocab: usize, sites: usize) -> Option<u128> {
    (vocab as u128).checked_pow(u32::try_from(sites).ok()?)
}

/// Number of `(condition, prefix)` rows a model over `schedule` needs.
pub(crate) fn row_count(schedule: &ScaleSchedule, vocab: usize, classes: usize) -> Option<u128> {
    let mut total: u128 = 0;
    for k in 0..schedule.len() {
        total = total.checked_add(checked_states(vocab, schedule.prefix_sites(k))?)?;
    }
    total.checked_mul(classes as u128)
}

impl TabularModel {
    /// Builds from explicit rows; `tables[class][scale]` is the flattened
    /// `prefixes x sites x vocab` array.
    pub fn from_tables(schedule: ScaleSchedule, vocab: usize, classes: usize, tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        Self::assemble(schedule, vocab, classes, None, tables)
    }

    fn assemble(
        schedule: ScaleSchedule,
        vocab: usize,
        classes: usize,
        seed: Option<u64>,
        tables: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if vocab == 0 || classes == 0 {
            return Err(Error::InvalidInput("vocabulary and class count must be positive".into()));
        }
        let count = row_count(&schedule, vocab, classes).unwrap_or(u128::MAX);
        if count > ENUMERATION_CAP {
            return Err(Error::TooLarge {
                count,
                cap: ENUMERATION_CAP,
            });
        }
        if tables.len() != classes {
            return Err(Error::ShapeMismatch(format!(
                "{} class tables for {classes} classes",
                tables.len()
            )));
        }
        for (c, per_scale) in tables.iter().enumerate() {
            if per_scale.len() != schedule.len() {
                return Err(Error::ShapeMismatch(format!(
                    "class {c} has {} scale tables, schedule has {}",
                    per_scale.len(),
                    schedule.len()
                )));
            }
            for (k, table) in per_scale.iter().enumerate() {
                let prefixes = checked_states(vocab, schedule.prefix_sites(k)).unwrap() as usize;
                let expected = prefixes * schedule.sites(k) * vocab;
                if table.len() != expected {
                    return Err(Error::ShapeMismatch(format!(
                        "class {c} scale {k}: {} entries, expected {expected}",
                        table.len()
                    )));
                }
                for (r, row) in table.chunks(vocab).enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&p| !(p > 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-12 {
                        return Err(Error::InvalidInput(format!(
                            "class {c} scale {k} categorical {r} is not a strictly positive distribution (sum {sum})"
                        )));
                    }
                }
            }
        }
        let reference = ReferenceCache::new(classes, schedule.len());
        Ok(Self {
            schedule,
            vocab,
            classes,
            seed,
            tables,
            reference,
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Number of `(class, prefix)` rows.
    pub fn num_rows(&self) -> usize {
        row_count(&self.schedule, self.vocab, self.classes).unwrap() as usize
    }

    fn prefix_index(&self, prefix: &[TokenMap]) -> usize {
        flatten_prefix(prefix)
            .iter()
            .fold(0usize, |acc, &id| acc * self.vocab + id as usize)
    }

    /// Stored row for `(class, prefix)`: `sites x vocab` probabilities.
    pub fn row(&self, class: u32, prefix: &[TokenMap]) -> Result<&[f64]> {
        let k = prefix.len();
        let width = self.schedule.sites(k) * self.vocab;
        let index = self.prefix_index(prefix);
        self.tables
            .get(class as usize)
            .and_then(|t| t.get(k))
            .and_then(|t| t.get(index * width..(index + 1) * width))
            .ok_or_else(|| Error::MissingRow {
                condition: class.to_string(),
                scale: k,
                prefix: flatten_prefix(prefix),
            })
    }

    /// `ln p(r_<k | c)` by chaining rows along the prefix.
    pub fn prefix_log_likelihood(&self, class: u32, prefix: &[TokenMap]) -> Result<f64> {
        let mut total = 0.0;
        for j in 0..prefix.len() {
            let row = self.row(class, &prefix[..j])?;
            for (s, &id) in prefix[j].ids.iter().enumerate() {
                total += row[s * self.vocab + id as usize].ln();
            }
        }
        Ok(total)
    }

    /// `p(c | r_<k)` under a uniform class prior.
    pub fn class_posterior(&self, prefix: &[TokenMap]) -> Result<Vec<f64>> {
        let logs = (0..self.classes as u32)
            .map(|c| self.prefix_log_likelihood(c, prefix))
            .collect::<Result<Vec<_>>>()?;
        Ok(super::softmax(&logs))
    }

    fn null_row(&self, prefix: &[TokenMap]) -> Result<Vec<f64>> {
        let weights = self.class_posterior(prefix)?;
        let width = self.schedule.sites(prefix.len()) * self.vocab;
        let mut out = vec![0.0; width];
        for (c, w) in weights.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.row(c as u32, prefix)?) {
                *o += w * p;
            }
        }
        Ok(out)
    }
}

impl Predictor for TabularModel {
    fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn supports_null(&self) -> bool {
        true
    }

    fn predict(&self, condition: Condition, prefix: &[TokenMap]) -> Result<LogitGrid> {
        let probs = self.site_probs(condition, prefix)?;
        let (h, w) = self.schedule.dims(prefix.len());
        LogitGrid::from_probs(prefix.len(), h, w, self.vocab, &probs)
    }

    fn site_probs(&self, condition: Condition, prefix: &[TokenMap]) -> Result<Vec<f64>> {
        validate_prefix(self, prefix)?;
        condition.validate(self.classes)?;
        match condition {
            Condition::Class(c) => Ok(self.row(c, prefix)?.to_vec()),
            Condition::Null => self.null_row(prefix),
        }
    }

    fn exact_reference(&self, condition: Condition, scale: usize) -> Result<LogitGrid> {
        condition.validate(self.classes)?;
        self.reference.get_or_compute(condition, scale, || {
            crate::oracle::reference_logits(self, condition, scale)
        })
    }
}

/// Seeded model whose rows are drawn from a symmetric Dirichlet(1), floored
/// at [`PROBABILITY_FLOOR`] and renormalised. Rows are generated class by
/// class, scale by scale, prefix index ascending, site ascending.
pub fn build_tabular(schedule: &ScaleSchedule, vocab: usize, classes: usize, seed: u64) -> Result<TabularModel> {
    if vocab == 0 || classes == 0 {
        return Err(Error::InvalidInput("vocabulary and class count must be positive".into()));
    }
    let count = row_count(schedule, vocab, classes).unwrap_or(u128::MAX);
    if count > ENUMERATION_CAP {
        return Err(Error::TooLarge {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma parameters");
    let mut rng = crate::seed::rng(seed);
    let mut tables = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut per_scale = Vec::with_capacity(schedule.len());
        for k in 0..schedule.len() {
            let prefixes = checked_states(vocab, schedule.prefix_sites(k)).unwrap() as usize;
            let categoricals = prefixes * schedule.sites(k);
            let mut table = Vec::with_capacity(categoricals * vocab);
            for _ in 0..categoricals {
                let draws: Vec<f64> = (0..vocab).map(|_| rng.sample(gamma)).collect();
                let z: f64 = draws.iter().sum();
                let floored: Vec<f64> = draws
                    .iter()
                    .map(|&g| if z > 0.0 { g / z } else { 1.0 / vocab as f64 })
                    .map(|p| p.max(PROBABILITY_FLOOR))
                    .collect();
                let z: f64 = floored.iter().sum();
                table.extend(floored.into_iter().map(|p| p / z));
            }
            per_scale.push(table);
        }
        tables.push(per_scale);
    }
    TabularModel::assemble(schedule.clone(), vocab, classes, Some(seed), tables)
}

impl TryFrom<TabularFile> for TabularModel {
    type Error = Error;

    fn try_from(file: TabularFile) -> Result<Self> {
        if file.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported tabular model version '{}'",
                file.version
            )));
        }
        TabularModel::assemble(file.schedule, file.vocab, file.classes, file.seed, file.tables)
    }
}

impl From<TabularModel> for TabularFile {
    fn from(m: TabularModel) -> Self {
        TabularFile {
            version: FORMAT_VERSION.to_string(),
            seed: m.seed,
            schedule: m.schedule,
            vocab: m.vocab,
            classes: m.classes,
            tables: m.tables,
        }
    }
}
