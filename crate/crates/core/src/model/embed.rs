use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{avg_pool, ScaleSchedule, TokenMap, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    /// Embedding dimension `m`.
    #[serde(default = "EmbedderSpec::default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EmbedderSpec {
    fn default_dim() -> usize {
        4
    }
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            dim: Self::default_dim(),
            seed: 0,
        }
    }
}

/// Seeded visual projection `Emb` and scale-position table `PosEmb`.
///
/// `Emb` is an `m x d` matrix with `N(0, 1/d)` entries; each `PosEmb(j, u)` is
/// an independent `N(0, 0.25)` vector. The projection is drawn first, then
/// the position table scale by scale, site by site.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    spec: EmbedderSpec,
    latent_dim: usize,
    /// Row-major `m x d`.
    projection: Vec<f64>,
    /// Per scale, `sites x m`.
    positions: Vec<Vec<f64>>,
}

impl Embedder {
    pub fn new(spec: EmbedderSpec, schedule: &ScaleSchedule, latent_dim: usize) -> Result<Self> {
        if spec.dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidInput("embedding and latent dimensions must be positive".into()));
        }
        let mut rng = crate::seed::rng(spec.seed);
        let scale = (latent_dim as f64).sqrt().recip();
        let projection = (0..spec.dim * latent_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let positions = (0..schedule.len())
            .map(|k| {
                (0..schedule.sites(k) * spec.dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5)
                    .collect()
            })
            .collect();
        Ok(Self {
            spec,
            latent_dim,
            projection,
            positions,
        })
    }

    pub fn spec(&self) -> EmbedderSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Row-major `m x d` projection matrix.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// `Emb(x)`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.projection
            .chunks(self.latent_dim)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `PosEmb(j, u)`.
    pub fn position(&self, scale: usize, site: usize) -> &[f64] {
        let m = self.spec.dim;
        &self.positions[scale][site * m..(site + 1) * m]
    }

    /// `e_{j,u} = Emb(F_j[u]) + PosEmb(j, u)` for every prefix site, where
    /// `F_j` is the cumulative latent through scale `j` average-pooled to the
    /// scale's grid.
    pub fn embed_prefix(&self, prefix: &[TokenMap], tokenizer: &Tokenizer) -> Result<PrefixEmbedding> {
        if tokenizer.dim() != self.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "embedder expects latent dim {}, tokenizer has {}",
                self.latent_dim,
                tokenizer.dim()
            )));
        }
        let mut latent = tokenizer.zero_latent();
        let mut scales = Vec::with_capacity(prefix.len());
        for (j, map) in prefix.iter().enumerate() {
            map.validate(&tokenizer.schedule, tokenizer.vocab())?;
            if map.scale != j || j >= self.positions.len() {
                return Err(Error::ShapeMismatch(format!(
                    "prefix position {j} holds a map for scale {}",
                    map.scale
                )));
            }
            latent = crate::tokenizer::accumulate_latent(&latent, map, &tokenizer.codebook)?;
            let pooled = avg_pool(&latent.0, (map.height, map.width))?;
            let content = (0..map.sites())
                .flat_map(|u| self.project(pooled.vector(u)))
                .collect();
            scales.push(ScaleEmbedding {
                height: map.height,
                width: map.width,
                content,
                position: self.positions[j].clone(),
            });
        }
        Ok(PrefixEmbedding {
            target_scale: prefix.len(),
            dim: self.spec.dim,
            scales,
        })
    }
}

/// Embedding of one prefix scale, kept as its content and position terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEmbedding {
    pub height: usize,
    pub width: usize,
    /// `Emb(F_j[u])`, `sites x m`.
    pub content: Vec<f64>,
    /// `PosEmb(j, u)`, `sites x m`.
    pub position: Vec<f64>,
}

impl ScaleEmbedding {
    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    fn dim(&self) -> usize {
        self.content.len() / self.sites().max(1)
    }

    pub fn content(&self, site: usize) -> &[f64] {
        let m = self.dim();
        &self.content[site * m..(site + 1) * m]
    }

    pub fn position(&self, site: usize) -> &[f64] {
        let m = self.dim();
        &self.position[site * m..(site + 1) * m]
    }

    /// `e_{j,u}`.
    pub fn vector(&self, site: usize) -> Vec<f64> {
        self.content(site)
            .iter()
            .zip(self.position(site))
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// Embedded prefix `{e_{j,u} : j < k}` for predicting scale `target_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixEmbedding {
    pub target_scale: usize,
    pub dim: usize,
    pub scales: Vec<ScaleEmbedding>,
}

impl PrefixEmbedding {
    pub fn vector(&self, scale: usize, site: usize) -> Vec<f64> {
        self.scales[scale].vector(site)
    }

    /// Mean of `e_{j,u}` over the sites of scale `j`.
    pub fn mean(&self, scale: usize) -> Vec<f64> {
        let s = &self.scales[scale];
        let mut out = vec![0.0; self.dim];
        for u in 0..s.sites() {
            for (o, v) in out.iter_mut().zip(s.vector(u)) {
                *o += v;
            }
        }
        let n = s.sites() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}
