use serde::{Deserialize, Serialize};

/// Row-major `(height, width)` grid of `dim`-dimensional vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl VectorGrid {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn vector(&self, site: usize) -> &[f64] {
        &self.data[site * self.dim..(site + 1) * self.dim]
    }

    pub fn vector_mut(&mut self, site: usize) -> &mut [f64] {
        &mut self.data[site * self.dim..(site + 1) * self.dim]
    }

    pub fn add_assign(&mut self, other: &VectorGrid) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &VectorGrid) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Largest per-site Euclidean norm.
    pub fn max_site_norm(&self) -> f64 {
        (0..self.sites())
            .map(|s| self.vector(s).iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Accumulated latent `f_k` at the finest resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent(pub VectorGrid);

/// Decoded image; same shape as the latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image(pub VectorGrid);

impl Image {
    /// Flattened per-site vectors, the feature used by toy-Fréchet.
    pub fn features(&self) -> &[f64] {
        &self.0.data
    }
}
