use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// How a seeded codebook is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookSpec {
    pub seed: u64,
    /// Scale `k` vectors have norm `radius_decay^k`.
    #[serde(default = "CodebookSpec::default_decay")]
    pub radius_decay: f64,
    /// Reserve id 0 at every scale for the zero vector.
    #[serde(default = "CodebookSpec::default_zero_code")]
    pub zero_code: bool,
}

impl CodebookSpec {
    fn default_decay() -> f64 {
        0.5
    }

    fn default_zero_code() -> bool {
        true
    }
}

impl Default for CodebookSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            radius_decay: Self::default_decay(),
            zero_code: Self::default_zero_code(),
        }
    }
}

/// Per-scale tables of `vocab` code vectors in a `dim`-dimensional latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookData", into = "CodebookData")]
pub struct Codebook {
    num_scales: usize,
    vocab: usize,
    dim: usize,
    /// `[scale][id][dim]`, flattened.
    vectors: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookData {
    vocab: usize,
    dim: usize,
    scales: Vec<Vec<Vec<f64>>>,
}

impl Codebook {
    /// Builds from explicit `[scale][id]` vectors.
    pub fn from_tables(tables: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let num_scales = tables.len();
        if num_scales == 0 {
            return Err(Error::InvalidInput("codebook needs at least one scale".into()));
        }
        let vocab = tables[0].len();
        if vocab == 0 {
            return Err(Error::InvalidInput("codebook vocabulary is empty".into()));
        }
        let dim = tables[0][0].len();
        if dim == 0 {
            return Err(Error::InvalidInput("codebook dimension is zero".into()));
        }
        let mut vectors = Vec::with_capacity(num_scales * vocab * dim);
        for (k, table) in tables.iter().enumerate() {
            if table.len() != vocab {
                return Err(Error::ShapeMismatch(format!(
                    "scale {k} has {} codes, expected {vocab}",
                    table.len()
                )));
            }
            for v in table {
                if v.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "code vector of length {} at scale {k}, expected {dim}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidInput(format!("non-finite code at scale {k}")));
                }
                vectors.extend_from_slice(v);
            }
        }
        Ok(Self {
            num_scales,
            vocab,
            dim,
            vectors,
        })
    }

    /// Directions uniform on the unit sphere, scaled by `radius_decay^k` at scale `k`.
    pub fn seeded(num_scales: usize, vocab: usize, dim: usize, spec: &CodebookSpec) -> Result<Self> {
        if vocab == 0 || dim == 0 || num_scales == 0 {
            return Err(Error::InvalidInput(
                "codebook needs positive scales, vocabulary and dimension".into(),
            ));
        }
        let mut rng = crate::seed::rng(spec.seed);
        let mut tables = Vec::with_capacity(num_scales);
        for k in 0..num_scales {
            let radius = spec.radius_decay.powi(k as i32);
            let mut table = Vec::with_capacity(vocab);
            for id in 0..vocab {
                if spec.zero_code && id == 0 {
                    table.push(vec![0.0; dim]);
                    continue;
                }
                let v = loop {
                    let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        break g.into_iter().map(|x| radius * x / norm).collect();
                    }
                };
                table.push(v);
            }
            tables.push(table);
        }
        Self::from_tables(tables)
    }

    /// Zero vector plus `±e_i` for every axis, scaled by `radius_decay^k`:
    /// `vocab = 2 dim + 1`, minimum separation `radius_decay^k`.
    pub fn axis_aligned(num_scales: usize, dim: usize, radius_decay: f64) -> Result<Self> {
        let tables = (0..num_scales)
            .map(|k| {
                let r = radius_decay.powi(k as i32);
                let mut table = vec![vec![0.0; dim]];
                for axis in 0..dim {
                    for sign in [1.0, -1.0] {
                        let mut v = vec![0.0; dim];
                        v[axis] = sign * r;
                        table.push(v);
                    }
                }
                table
            })
            .collect();
        Self::from_tables(tables)
    }

    pub fn num_scales(&self) -> usize {
        self.num_scales
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, scale: usize, id: TokenId) -> &[f64] {
        let start = (scale * self.vocab + id as usize) * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Nearest code (Euclidean) at `scale`; ties go to the lower id.
    pub fn nearest(&self, scale: usize, x: &[f64]) -> TokenId {
        let mut best = (f64::INFINITY, 0);
        for id in 0..self.vocab as TokenId {
            let d: f64 = self
                .vector(scale, id)
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, id);
            }
        }
        best.1
    }
}

impl TryFrom<CodebookData> for Codebook {
    type Error = Error;

    fn try_from(data: CodebookData) -> Result<Self> {
        let book = Codebook::from_tables(data.scales)?;
        if book.vocab != data.vocab || book.dim != data.dim {
            return Err(Error::ShapeMismatch(
                "codebook header disagrees with its tables".into(),
            ));
        }
        Ok(book)
    }
}

impl From<Codebook> for CodebookData {
    fn from(book: Codebook) -> Self {
        let scales = (0..book.num_scales)
            .map(|k| {
                (0..book.vocab as TokenId)
                    .map(|id| book.vector(k, id).to_vec())
                    .collect()
            })
            .collect();
        CodebookData {
            vocab: book.vocab,
            dim: book.dim,
            scales,
        }
    }
}
