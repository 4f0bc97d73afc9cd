use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sampler::SequenceLaw;
use crate::tokenizer::Image;

/// KL(p || q) in nats over enumerated sequences.
///
/// Any sequence with mass under `p` and none under `q` is a support violation
/// and reported as an error rather than an infinite value.
pub fn exact_kl(p: &SequenceLaw, q: &SequenceLaw) -> Result<f64> {
    let mut total = 0.0;
    for (seq, &a) in &p.probs {
        if a <= 0.0 {
            continue;
        }
        let b = q.probability(seq);
        if !(b > 0.0) {
            return Err(Error::SupportViolation(format!("{seq:?}")));
        }
        total += a * (a / b).ln();
    }
    Ok(total.max(0.0))
}

/// KL(p || q) in nats over a shared outcome index.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} outcomes", p.len(), q.len())));
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a <= 0.0 {
            continue;
        }
        if !(b > 0.0) {
            return Err(Error::SupportViolation(format!("outcome {i}")));
        }
        total += a * (a / b).ln();
    }
    Ok(total.max(0.0))
}

fn moments(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidInput("toy-Fréchet needs at least two samples per set".into()));
    }
    let dim = set[0].len();
    if dim == 0 || set.iter().any(|x| x.len() != dim) {
        return Err(Error::ShapeMismatch("feature vectors differ in length".into()));
    }
    let data = DMatrix::from_fn(n, dim, |i, j| set[i][j]);
    let mean = data.row_mean().transpose();
    let centered = DMatrix::from_fn(n, dim, |i, j| data[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature statistics".into()));
    }
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from rounding are clamped to zero.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits (sample covariance, `n - 1`) of
/// two feature sets: `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.
pub fn toy_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::ShapeMismatch("feature sets differ in dimension".into()));
    }
    let root_a = sqrt_psd(cov_a.clone());
    let cross = sqrt_psd(&root_a * &cov_b * &root_a);
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(Error::InvalidInput("toy-Fréchet is not finite".into()));
    }
    Ok(value.max(0.0))
}

/// [`toy_frechet`] on flattened decoded images.
pub fn toy_frechet_images(a: &[Image], b: &[Image]) -> Result<f64> {
    let features = |set: &[Image]| set.iter().map(|i| i.features().to_vec()).collect::<Vec<_>>();
    toy_frechet(&features(a), &features(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_against_uniform_is_ln2() {
        let v = kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn missing_support_is_flagged() {
        assert!(matches!(kl(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::SupportViolation(_))));
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = vec![vec![-1.0], vec![1.0]];
        let b = vec![vec![2.0], vec![4.0]];
        assert!((toy_frechet(&a, &b).unwrap() - 9.0).abs() < 1e-9);
        assert!((toy_frechet(&b, &a).unwrap() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn identical_sets_are_at_distance_zero() {
        let a: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64 * 0.1, -(i as f64)]).collect();
        assert!(toy_frechet(&a, &a).unwrap() < 1e-9);
    }

    #[test]
    fn single_sample_is_rejected() {
        assert!(toy_frechet(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
    }
}
