use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_tabular, fixtures, TabularModel};
use crate::oracle::{verify_identities, IdentityGrid, IdentityReference, IdentityRow};
use crate::tokenizer::ScaleSchedule;

/// Population of tabular models and strength grid checked by [`run_verify`].
///
/// Random model `i` uses `schedules[i mod S]`, `vocab_sizes[(i / S) mod NV]`,
/// `class_counts[(i / (S NV)) mod NC]` and seed `derive(seed, [i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default = "VerifySpec::default_models")]
    pub random_models: usize,
    #[serde(default = "VerifySpec::default_schedules")]
    pub schedules: Vec<ScaleSchedule>,
    #[serde(default = "VerifySpec::default_vocab_sizes")]
    pub vocab_sizes: Vec<usize>,
    #[serde(default = "VerifySpec::default_class_counts")]
    pub class_counts: Vec<usize>,
    #[serde(default = "VerifySpec::default_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default = "VerifySpec::default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Largest KL(logit rule || oracle) accepted, nats.
    #[serde(default = "VerifySpec::default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub reference: IdentityReference,
    /// Also check the hand-specified fixtures.
    #[serde(default = "VerifySpec::default_fixtures")]
    pub fixtures: bool,
    #[serde(default)]
    pub seed: u64,
}

impl VerifySpec {
    fn default_models() -> usize {
        100
    }

    fn default_schedules() -> Vec<ScaleSchedule> {
        vec![
            ScaleSchedule::new(vec![(1, 1), (1, 1)]).unwrap(),
            ScaleSchedule::new(vec![(1, 1), (1, 2)]).unwrap(),
        ]
    }

    fn default_vocab_sizes() -> Vec<usize> {
        vec![2, 3, 5]
    }

    fn default_class_counts() -> Vec<usize> {
        vec![1, 2, 3]
    }

    fn default_gammas() -> Vec<f64> {
        vec![0.0, 0.5, 1.0, 3.0]
    }

    fn default_lambdas() -> Vec<f64> {
        vec![0.0, 0.5, 1.0, 1.3, 1.8, 2.4, 3.0]
    }

    fn default_tolerance() -> f64 {
        1e-9
    }

    fn default_fixtures() -> bool {
        true
    }

    pub fn validate(&self) -> Result<()> {
        if self.random_models > 0 && (self.schedules.is_empty() || self.vocab_sizes.is_empty() || self.class_counts.is_empty()) {
            return Err(Error::Config("verify needs schedules, vocab_sizes and class_counts".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config(format!("verify tolerance must be non-negative, got {}", self.tolerance)));
        }
        Ok(())
    }

    fn grid(&self) -> IdentityGrid {
        IdentityGrid {
            gammas: self.gammas.clone(),
            lambdas: self.lambdas.clone(),
            reference: self.reference,
        }
    }

    /// Labelled models in checking order: fixtures first, then the random population.
    pub fn models(&self) -> Result<Vec<(String, TabularModel)>> {
        self.validate()?;
        let mut out = Vec::new();
        if self.fixtures {
            out.push(("fixture_m1".to_string(), fixtures::m1()));
            out.push(("fixture_two_class".to_string(), fixtures::two_class_single_scale()));
        }
        let (ns, nv) = (self.schedules.len().max(1), self.vocab_sizes.len().max(1));
        for i in 0..self.random_models {
            let schedule = &self.schedules[i % ns];
            let vocab = self.vocab_sizes[(i / ns) % nv];
            let classes = self.class_counts[(i / (ns * nv)) % self.class_counts.len()];
            let seed = crate::seed::derive(self.seed, &[i as u64]);
            out.push((
                format!("random_{i}_v{vocab}_c{classes}_s{seed}"),
                build_tabular(schedule, vocab, classes, seed)?,
            ));
        }
        Ok(out)
    }
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            random_models: Self::default_models(),
            schedules: Self::default_schedules(),
            vocab_sizes: Self::default_vocab_sizes(),
            class_counts: Self::default_class_counts(),
            gammas: Self::default_gammas(),
            lambdas: Self::default_lambdas(),
            tolerance: Self::default_tolerance(),
            reference: IdentityReference::ExactMarginal,
            fixtures: Self::default_fixtures(),
            seed: 0,
        }
    }
}

/// Identity row tagged with the model it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub model: String,
    pub identity: crate::oracle::Identity,
    pub condition: u32,
    pub scale: usize,
    pub prefix: String,
    pub site: String,
    pub gamma: f64,
    pub lambda: f64,
    pub max_abs_diff: f64,
    pub kl: f64,
    pub reference_gap: f64,
}

impl VerifyRow {
    fn tag(model: &str, r: IdentityRow) -> Self {
        Self {
            model: model.to_string(),
            identity: r.identity,
            condition: r.condition,
            scale: r.scale,
            prefix: r.prefix,
            site: r.site,
            gamma: r.gamma,
            lambda: r.lambda,
            max_abs_diff: r.max_abs_diff,
            kl: r.kl,
            reference_gap: r.reference_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub rows: Vec<VerifyRow>,
    pub models: usize,
    pub tolerance: f64,
    pub max_kl: f64,
    pub runtime_ms: f64,
}

impl VerifyOutcome {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.kl <= self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &VerifyRow> {
        self.rows.iter().filter(move |r| !(r.kl <= self.tolerance))
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the identity checks over every model of `spec`, plus `extra` models.
pub fn run_verify(spec: &VerifySpec, extra: &[(String, &TabularModel)]) -> Result<VerifyOutcome> {
    let start = Instant::now();
    let grid = spec.grid();
    let owned = spec.models()?;
    let models: Vec<(&str, &TabularModel)> = owned
        .iter()
        .map(|(l, m)| (l.as_str(), m))
        .chain(extra.iter().map(|(l, m)| (l.as_str(), *m)))
        .collect();
    let mut rows = Vec::new();
    for (label, model) in &models {
        let report = verify_identities(*model, &grid, spec.tolerance)?;
        rows.extend(report.rows.into_iter().map(|r| VerifyRow::tag(label, r)));
    }
    let max_kl = rows.iter().map(|r| r.kl).fold(0.0, f64::max);
    Ok(VerifyOutcome {
        rows,
        models: models.len(),
        tolerance: spec.tolerance,
        max_kl,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
