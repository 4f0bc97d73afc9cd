//! Corrupted prefixes `r~_<k`: site selection, same-scale donors and the
//! replacement variants applied to a [`PrefixEmbedding`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Embedder, PrefixEmbedding};
use crate::tokenizer::{ScaleSchedule, TokenId, TokenMap, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionVariant {
    /// Content term replaced by the projection of a uniformly drawn code vector.
    RandomCodebook,
    /// Content term copied from the donor; position kept.
    SameScaleToken,
    /// Position term copied from the donor; content kept.
    SameScalePosition,
    /// Whole embedding copied from the donor.
    SameScaleFullEmbedding,
    /// Entire prefix re-embedded from i.i.d. uniform tokens; ignores site selection.
    UniformPrefix,
}

impl CorruptionVariant {
    pub const ALL: [CorruptionVariant; 5] = [
        CorruptionVariant::RandomCodebook,
        CorruptionVariant::SameScaleToken,
        CorruptionVariant::SameScalePosition,
        CorruptionVariant::SameScaleFullEmbedding,
        CorruptionVariant::UniformPrefix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionVariant::RandomCodebook => "random_codebook",
            CorruptionVariant::SameScaleToken => "same_scale_token",
            CorruptionVariant::SameScalePosition => "same_scale_position",
            CorruptionVariant::SameScaleFullEmbedding => "same_scale_full_embedding",
            CorruptionVariant::UniformPrefix => "uniform_prefix",
        }
    }
}

impl fmt::Display for CorruptionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown corruption variant '{s}'")))
    }
}

/// One selected prefix site `(j, u)` and its replacement source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub scale: usize,
    pub site: usize,
    /// Same-scale donor site `u'` (may equal `site`).
    pub donor: usize,
    /// Code drawn for [`CorruptionVariant::RandomCodebook`].
    pub code: Option<TokenId>,
}

/// Everything needed to corrupt one step's prefix, reproducibly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionPlan {
    /// Scale being predicted; the prefix covers scales `0..target_scale`.
    pub target_scale: usize,
    pub variant: CorruptionVariant,
    pub fraction: f64,
    pub seed: u64,
    /// Selected sites, ordered by `(scale, site)`.
    pub entries: Vec<PlanEntry>,
    /// Replacement prefix for [`CorruptionVariant::UniformPrefix`].
    pub uniform_prefix: Option<Vec<TokenMap>>,
}

impl CorruptionPlan {
    /// Whether applying the plan leaves every embedding unchanged by construction.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.uniform_prefix.is_none()
    }
}

/// Products within this distance of a half round as exact halves.
const HALF_SLACK: f64 = 1e-9;

/// `|S_k| = round(fraction * total)`, halves rounded up.
pub fn selection_size(total_sites: usize, fraction: f64) -> usize {
    ((fraction * total_sites as f64 + 0.5 + HALF_SLACK).floor() as usize).min(total_sites)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidFraction(fraction));
    }
    Ok(())
}

/// Draws a plan for predicting scale `k`.
///
/// Sites are chosen uniformly without replacement among all prefix sites;
/// each selected site gets an independent uniform donor from its own scale.
pub fn plan_corruption(
    schedule: &ScaleSchedule,
    k: usize,
    fraction: f64,
    variant: CorruptionVariant,
    vocab: usize,
    seed: u64,
) -> Result<CorruptionPlan> {
    check_fraction(fraction)?;
    if k >= schedule.len() {
        return Err(Error::InvalidInput(format!(
            "cannot corrupt the prefix of scale {k} in a {}-scale schedule",
            schedule.len()
        )));
    }
    if vocab == 0 {
        return Err(Error::InvalidInput("vocabulary is empty".into()));
    }
    let mut rng = crate::seed::rng(seed);
    let mut plan = CorruptionPlan {
        target_scale: k,
        variant,
        fraction,
        seed,
        entries: Vec::new(),
        uniform_prefix: None,
    };
    if variant == CorruptionVariant::UniformPrefix {
        if fraction > 0.0 && k > 0 {
            let maps = (0..k)
                .map(|j| {
                    let (h, w) = schedule.dims(j);
                    let ids = (0..h * w).map(|_| rng.random_range(0..vocab as TokenId)).collect();
                    TokenMap::new(j, h, w, ids)
                })
                .collect::<Result<_>>()?;
            plan.uniform_prefix = Some(maps);
        }
        return Ok(plan);
    }
    let total = schedule.prefix_sites(k);
    let mut chosen = index::sample(&mut rng, total, selection_size(total, fraction)).into_vec();
    chosen.sort_unstable();
    let mut offsets = Vec::with_capacity(k);
    let mut acc = 0;
    for j in 0..k {
        offsets.push(acc);
        acc += schedule.sites(j);
    }
    for flat in chosen {
        let scale = offsets.partition_point(|&o| o <= flat) - 1;
        let site = flat - offsets[scale];
        let donor = rng.random_range(0..schedule.sites(scale));
        let code = (variant == CorruptionVariant::RandomCodebook)
            .then(|| rng.random_range(0..vocab as TokenId));
        plan.entries.push(PlanEntry {
            scale,
            site,
            donor,
            code,
        });
    }
    Ok(plan)
}

/// Returns the corrupted embedding `e~`; the input is not modified.
pub fn apply_corruption(
    embedding: &PrefixEmbedding,
    plan: &CorruptionPlan,
    embedder: &Embedder,
    tokenizer: &Tokenizer,
) -> Result<PrefixEmbedding> {
    if plan.target_scale != embedding.target_scale || embedding.scales.len() != embedding.target_scale {
        return Err(Error::Inconsistent(format!(
            "plan for scale {} applied to an embedding for scale {}",
            plan.target_scale, embedding.target_scale
        )));
    }
    if let Some(prefix) = &plan.uniform_prefix {
        if plan.variant != CorruptionVariant::UniformPrefix || prefix.len() != plan.target_scale {
            return Err(Error::Inconsistent("malformed uniform prefix".into()));
        }
        return embedder.embed_prefix(prefix, tokenizer);
    }
    let mut out = embedding.clone();
    let m = embedding.dim;
    for entry in &plan.entries {
        let Some(source) = embedding.scales.get(entry.scale) else {
            return Err(Error::Inconsistent(format!("no prefix scale {}", entry.scale)));
        };
        if entry.site >= source.sites() || entry.donor >= source.sites() {
            return Err(Error::Inconsistent(format!(
                "site {} or donor {} outside scale {} with {} sites",
                entry.site,
                entry.donor,
                entry.scale,
                source.sites()
            )));
        }
        let target = &mut out.scales[entry.scale];
        let (u, d) = (entry.site * m..(entry.site + 1) * m, entry.donor * m..(entry.donor + 1) * m);
        match plan.variant {
            CorruptionVariant::SameScaleFullEmbedding => {
                target.content[u.clone()].copy_from_slice(&source.content[d.clone()]);
                target.position[u].copy_from_slice(&source.position[d]);
            }
            CorruptionVariant::SameScaleToken => {
                target.content[u].copy_from_slice(&source.content[d]);
            }
            CorruptionVariant::SameScalePosition => {
                target.position[u].copy_from_slice(&source.position[d]);
            }
            CorruptionVariant::RandomCodebook => {
                let code = entry
                    .code
                    .ok_or_else(|| Error::Inconsistent("random-codebook entry without a code".into()))?;
                if code as usize >= tokenizer.vocab() {
                    return Err(Error::InvalidToken {
                        id: code,
                        vocab: tokenizer.vocab(),
                    });
                }
                let projected = embedder.project(tokenizer.codebook.vector(entry.scale, code));
                target.content[u].copy_from_slice(&projected);
            }
            CorruptionVariant::UniformPrefix => {
                return Err(Error::Inconsistent("uniform-prefix plan with site entries".into()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanRecord {
    step: usize,
    variant: CorruptionVariant,
    fraction: f64,
    seed: u64,
    /// `select` for a corrupted site, `uniform` for a replacement-prefix token.
    kind: String,
    scale: usize,
    site: usize,
    donor: Option<usize>,
    code: Option<TokenId>,
}

/// Writes plans as CSV with one row per selected site (or per replacement
/// token for uniform-prefix plans); columns
/// `step,variant,fraction,seed,kind,scale,site,donor,code`.
/// Plans with nothing selected get one row with `kind = none`.
pub fn write_plans_csv<W: Write>(writer: W, plans: &[CorruptionPlan]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for plan in plans {
        let base = |kind: &str, scale, site, donor, code| PlanRecord {
            step: plan.target_scale,
            variant: plan.variant,
            fraction: plan.fraction,
            seed: plan.seed,
            kind: kind.to_string(),
            scale,
            site,
            donor,
            code,
        };
        if let Some(prefix) = &plan.uniform_prefix {
            for map in prefix {
                for (u, &id) in map.ids.iter().enumerate() {
                    out.serialize(base("uniform", map.scale, u, None, Some(id)))?;
                }
            }
        } else if plan.entries.is_empty() {
            out.serialize(base("none", 0, 0, None, None))?;
        }
        for e in &plan.entries {
            out.serialize(base("select", e.scale, e.site, Some(e.donor), e.code))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Inverse of [`write_plans_csv`].
pub fn read_plans_csv<R: Read>(reader: R, schedule: &ScaleSchedule) -> Result<Vec<CorruptionPlan>> {
    let mut input = csv::Reader::from_reader(reader);
    let mut plans: Vec<CorruptionPlan> = Vec::new();
    let mut uniform: Vec<Vec<TokenId>> = Vec::new();
    for record in input.deserialize::<PlanRecord>() {
        let r = record?;
        check_fraction(r.fraction)?;
        let same = plans.last().is_some_and(|p| {
            p.target_scale == r.step && p.variant == r.variant && p.seed == r.seed && r.kind != "none"
        });
        if !same {
            finish_uniform(plans.last_mut(), &mut uniform, schedule)?;
            plans.push(CorruptionPlan {
                target_scale: r.step,
                variant: r.variant,
                fraction: r.fraction,
                seed: r.seed,
                entries: Vec::new(),
                uniform_prefix: None,
            });
        }
        match r.kind.as_str() {
            "none" => {}
            "select" => plans.last_mut().unwrap().entries.push(PlanEntry {
                scale: r.scale,
                site: r.site,
                donor: r.donor.ok_or_else(|| Error::InvalidInput("select row without donor".into()))?,
                code: r.code,
            }),
            "uniform" => {
                if uniform.len() <= r.scale {
                    uniform.resize(r.scale + 1, Vec::new());
                }
                uniform[r.scale].push(r.code.ok_or_else(|| Error::InvalidInput("uniform row without code".into()))?);
            }
            other => return Err(Error::InvalidInput(format!("unknown plan row kind '{other}'"))),
        }
    }
    finish_uniform(plans.last_mut(), &mut uniform, schedule)?;
    Ok(plans)
}

fn finish_uniform(plan: Option<&mut CorruptionPlan>, ids: &mut Vec<Vec<TokenId>>, schedule: &ScaleSchedule) -> Result<()> {
    let Some(plan) = plan else { return Ok(()) };
    if ids.is_empty() {
        return Ok(());
    }
    let maps = std::mem::take(ids)
        .into_iter()
        .enumerate()
        .map(|(j, ids)| {
            let (h, w) = schedule.dims(j);
            TokenMap::new(j, h, w, ids)
        })
        .collect::<Result<_>>()?;
    plan.uniform_prefix = Some(maps);
    Ok(())
}
