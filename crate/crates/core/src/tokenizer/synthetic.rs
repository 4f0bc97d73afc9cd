//! Seeded synthetic images: mixtures of axis-aligned Gaussian bumps.
//!
//! Given `(seed, class)` the rendered grid is bit-for-bit reproducible. Each
//! image has 1 to 3 bumps with centres uniform over the grid, per-axis widths
//! uniform in `[0.5, max(h, w) / 2 + 0.5]`, and an amplitude vector whose
//! direction is set by the class (angle `2 pi c / C` in the first two latent
//! axes, sign for `d = 1`) with magnitude uniform in `[0.4, 0.9]` plus
//! `N(0, 0.1^2)` jitter per component.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::seed::Rng;
use crate::tokenizer::{Image, VectorGrid};

pub fn class_direction(class: u32, classes: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 1 {
        v[0] = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
    } else {
        let theta = 2.0 * std::f64::consts::PI * class as f64 / classes.max(1) as f64;
        v[0] = theta.cos();
        v[1] = theta.sin();
    }
    v
}

pub fn bump_image(height: usize, width: usize, dim: usize, class: u32, classes: usize, rng: &mut Rng) -> Image {
    let mut grid = VectorGrid::zeros(height, width, dim);
    let direction = class_direction(class, classes, dim);
    let max_sigma = height.max(width) as f64 / 2.0 + 0.5;
    let bumps = rng.random_range(1..=3);
    for _ in 0..bumps {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let sy = rng.random_range(0.5..=max_sigma);
        let sx = rng.random_range(0.5..=max_sigma);
        let magnitude = rng.random_range(0.4..=0.9);
        let amplitude: Vec<f64> = direction
            .iter()
            .map(|d| magnitude * d + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for i in 0..height {
            for j in 0..width {
                let dy = (i as f64 + 0.5 - cy) / sy;
                let dx = (j as f64 + 0.5 - cx) / sx;
                let weight = (-0.5 * (dy * dy + dx * dx)).exp();
                for (v, a) in grid.vector_mut(i * width + j).iter_mut().zip(&amplitude) {
                    *v += weight * a;
                }
            }
        }
    }
    Image(grid)
}
