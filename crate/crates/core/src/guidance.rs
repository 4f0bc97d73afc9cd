//! Classifier-free guidance, visual prefix guidance and their composition as
//! logit-space extrapolations.
//!
//! The composition is sequential: CFG is applied separately to the genuine
//! and corrupted branches, then VPG contrasts the two guided results. The
//! alternative of exponentiating a single combined density is a different
//! sampler and is not implemented.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corruption::{plan_corruption, CorruptionPlan, CorruptionVariant};
use crate::error::{Error, Result};
use crate::model::{Condition, LogitGrid, Predictor};
use crate::seed::Rng;
use crate::tokenizer::TokenMap;

/// What the VPG contrast branch is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// The model on a corrupted copy of the generated prefix.
    #[default]
    Corrupted,
    /// The exact prefix-marginalised predictive of the model (enumeration).
    ExactMarginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// CFG strength `gamma >= 0`.
    #[serde(default)]
    pub cfg_scale: f64,
    /// VPG strength `lambda >= 0`.
    #[serde(default)]
    pub vpg_scale: f64,
    /// Fraction `n_p` of prefix sites to corrupt.
    #[serde(default = "GuidanceConfig::default_fraction")]
    pub corruption_fraction: f64,
    #[serde(default = "GuidanceConfig::default_variant")]
    pub variant: CorruptionVariant,
    /// Zero-based scales where VPG applies; `None` means all.
    #[serde(default)]
    pub scale_mask: Option<Vec<usize>>,
    #[serde(default)]
    pub reference: ReferenceMode,
}

impl GuidanceConfig {
    fn default_fraction() -> f64 {
        0.5
    }

    fn default_variant() -> CorruptionVariant {
        CorruptionVariant::SameScaleFullEmbedding
    }

    /// No guidance at all.
    pub fn unguided() -> Self {
        Self {
            cfg_scale: 0.0,
            vpg_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_scales: usize) -> Result<()> {
        for (name, v) in [("cfg_scale", self.cfg_scale), ("vpg_scale", self.vpg_scale)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::InvalidFraction(self.corruption_fraction));
        }
        if let Some(mask) = &self.scale_mask {
            if let Some(&k) = mask.iter().find(|&&k| k >= num_scales) {
                return Err(Error::Config(format!(
                    "scale mask entry {k} outside a {num_scales}-scale schedule"
                )));
            }
        }
        Ok(())
    }

    /// Whether the VPG contrast is applied when predicting scale `k`.
    pub fn vpg_active(&self, k: usize) -> bool {
        self.vpg_scale > 0.0 && k > 0 && self.scale_mask.as_ref().is_none_or(|m| m.contains(&k))
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 0.0,
            vpg_scale: 0.0,
            corruption_fraction: Self::default_fraction(),
            variant: Self::default_variant(),
            scale_mask: None,
            reference: ReferenceMode::Corrupted,
        }
    }
}

/// Branch logits for one step; only `cond_gen` is always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLogits {
    pub cond_gen: LogitGrid,
    pub null_gen: Option<LogitGrid>,
    pub cond_corr: Option<LogitGrid>,
    pub null_corr: Option<LogitGrid>,
}

impl BranchLogits {
    pub fn conditional(cond_gen: LogitGrid) -> Self {
        Self {
            cond_gen,
            null_gen: None,
            cond_corr: None,
            null_corr: None,
        }
    }
}

fn extrapolate(a: &LogitGrid, b: &LogitGrid, w: f64) -> Result<LogitGrid> {
    a.check_same_shape(b)?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (1.0 + w) * x - w * y)
        .collect();
    LogitGrid::new(a.scale, a.height, a.width, a.vocab, data)
}

/// `(1 + gamma) l_c - gamma l_null`.
pub fn cfg_combine(cond: &LogitGrid, null: &LogitGrid, gamma: f64) -> Result<LogitGrid> {
    extrapolate(cond, null, gamma)
}

/// `(1 + lambda) l_gen - lambda l_corr`.
pub fn vpg_combine(gen: &LogitGrid, corr: &LogitGrid, lambda: f64) -> Result<LogitGrid> {
    extrapolate(gen, corr, lambda)
}

/// CFG on each branch pair, then VPG between the guided results. A zero
/// strength skips its stage, so the corresponding branches may be absent.
pub fn compose_cfg_vpg(branches: &BranchLogits, gamma: f64, lambda: f64) -> Result<LogitGrid> {
    let guide = |cond: &LogitGrid, null: Option<&LogitGrid>, which| -> Result<LogitGrid> {
        if gamma == 0.0 {
            return Ok(cond.clone());
        }
        cfg_combine(cond, null.ok_or(Error::MissingBranch(which))?, gamma)
    };
    let gen = guide(&branches.cond_gen, branches.null_gen.as_ref(), "null condition, generated prefix")?;
    if lambda == 0.0 {
        return Ok(gen);
    }
    let cond_corr = branches
        .cond_corr
        .as_ref()
        .ok_or(Error::MissingBranch("condition, corrupted prefix"))?;
    let corr = guide(cond_corr, branches.null_corr.as_ref(), "null condition, corrupted prefix")?;
    vpg_combine(&gen, &corr, lambda)
}

/// Guided logits for one step plus the evidence that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep {
    pub logits: LogitGrid,
    pub branches: BranchLogits,
    pub plan: Option<CorruptionPlan>,
    /// Number of branch evaluations performed.
    pub evaluations: usize,
}

/// One guided prediction for scale `prefix.len()`. A plan seed is drawn
/// from `rng` only when a corrupted branch is needed.
pub fn guided_step<P: Predictor + ?Sized>(
    predictor: &P,
    condition: Condition,
    prefix: &[TokenMap],
    config: &GuidanceConfig,
    rng: &mut Rng,
) -> Result<GuidedStep> {
    let k = prefix.len();
    let plan = if config.vpg_active(k) && config.reference == ReferenceMode::Corrupted {
        let seed = rng.random::<u64>();
        Some(plan_corruption(
            predictor.schedule(),
            k,
            config.corruption_fraction,
            config.variant,
            predictor.vocab(),
            seed,
        )?)
    } else {
        None
    };
    guided_step_with_plan(predictor, condition, prefix, config, plan)
}

/// [`guided_step`] with the corruption plan supplied by the caller.
pub fn guided_step_with_plan<P: Predictor + ?Sized>(
    predictor: &P,
    condition: Condition,
    prefix: &[TokenMap],
    config: &GuidanceConfig,
    plan: Option<CorruptionPlan>,
) -> Result<GuidedStep> {
    config.validate(predictor.schedule().len())?;
    let k = prefix.len();
    let use_cfg = config.cfg_scale > 0.0;
    let use_vpg = config.vpg_active(k);
    if use_cfg && !predictor.supports_null() {
        return Err(Error::Config(
            "cfg_scale > 0 needs a model that can evaluate the null condition".into(),
        ));
    }
    let mut evaluations = 1;
    let mut branches = BranchLogits::conditional(predictor.predict(condition, prefix)?);
    if use_cfg {
        branches.null_gen = Some(predictor.predict(Condition::Null, prefix)?);
        evaluations += 1;
    }
    let mut used_plan = None;
    if use_vpg {
        let mut conditions = vec![condition];
        if use_cfg {
            conditions.push(Condition::Null);
        }
        let corr: Vec<LogitGrid> = match config.reference {
            ReferenceMode::ExactMarginal => conditions
                .iter()
                .map(|&c| predictor.exact_reference(c, k))
                .collect::<Result<_>>()?,
            ReferenceMode::Corrupted => {
                if !predictor.supports_corruption() {
                    return Err(Error::Config(
                        "this model cannot evaluate corrupted prefixes; use the exact_marginal reference".into(),
                    ));
                }
                let plan = plan.ok_or(Error::MissingBranch("corruption plan"))?;
                if plan.target_scale != k {
                    return Err(Error::Inconsistent(format!(
                        "plan for scale {} used at scale {k}",
                        plan.target_scale
                    )));
                }
                let out = conditions
                    .iter()
                    .map(|&c| predictor.predict_corrupted(c, prefix, &plan))
                    .collect::<Result<_>>()?;
                used_plan = Some(plan);
                out
            }
        };
        evaluations += corr.len();
        let mut corr = corr.into_iter();
        branches.cond_corr = corr.next();
        branches.null_corr = corr.next();
    }
    let gamma = if use_cfg { config.cfg_scale } else { 0.0 };
    let lambda = if use_vpg { config.vpg_scale } else { 0.0 };
    let logits = compose_cfg_vpg(&branches, gamma, lambda)?;
    Ok(GuidedStep {
        logits,
        branches,
        plan: used_plan,
        evaluations,
    })
}
