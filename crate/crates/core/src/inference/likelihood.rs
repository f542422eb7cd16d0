use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky};

/// Independent Gaussian noise with one standard deviation per block of data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    blocks: Vec<(usize, f64)>,
}

impl NoiseModel {
    /// `blocks` lists `(length, standard deviation)` in data order.
    pub fn new(blocks: Vec<(usize, f64)>) -> Result<Self> {
        for &(_, sd) in &blocks {
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::InvalidArgument(format!("noise standard deviation must be positive (got {sd})")));
            }
        }
        Ok(Self { blocks })
    }

    pub fn iid(len: usize, sd: f64) -> Result<Self> {
        Self::new(vec![(len, sd)])
    }

    pub fn blocks(&self) -> &[(usize, f64)] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.0).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn std_devs(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.blocks.iter().flat_map(|&(n, sd)| std::iter::repeat_n(sd, n)),
        )
    }

    /// Dense `Γ_e`.
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.std_devs().map(|s| s * s))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let sd = self.std_devs();
        DVector::from_fn(sd.len(), |i, _| sd[i] * rng.sample::<f64, _>(StandardNormal))
    }
}

/// `−½ Σ ((d_i − pred_i) / δ_i)²`
pub fn gaussian_loglik(d: &DVector<f64>, prediction: &DVector<f64>, noise: &NoiseModel) -> Result<f64> {
    if d.len() != prediction.len() || d.len() != noise.len() {
        return Err(Error::shape("likelihood", d.len(), format!("{} / {}", prediction.len(), noise.len())));
    }
    let mut acc = 0.0;
    let mut i = 0;
    for &(n, sd) in noise.blocks() {
        for _ in 0..n {
            acc += ((d[i] - prediction[i]) / sd).powi(2);
            i += 1;
        }
    }
    Ok(-0.5 * acc)
}

#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Conjugate update for `d = G s + e`, evaluated in gain form:
/// `K = Γ Gᵀ (G Γ Gᵀ + Γ_e)⁻¹`, mean `s* + K (d − G s*)`, covariance `Γ − K G Γ`.
pub fn linear_gaussian_posterior(
    g: &DMatrix<f64>,
    noise: &NoiseModel,
    d: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
) -> Result<GaussianPosterior> {
    let (q, n) = g.shape();
    if prior_mean.len() != n || prior_cov.shape() != (n, n) {
        return Err(Error::shape("linear posterior prior", n, prior_mean.len()));
    }
    if d.len() != q || noise.len() != q {
        return Err(Error::shape("linear posterior data", q, d.len()));
    }
    if q == 0 {
        return Ok(GaussianPosterior {
            mean: prior_mean.clone(),
            covariance: prior_cov.clone(),
        });
    }
    let gamma_gt = prior_cov * g.transpose();
    let s = linalg::symmetrize(&(g * &gamma_gt + noise.covariance()));
    let sf = cholesky(&s)?;
    let innovation = d - g * prior_mean;
    let mean = prior_mean + &gamma_gt * sf.solve(&innovation);
    let w = sf.solve_lower_matrix(&gamma_gt.transpose());
    let covariance = linalg::symmetrize(&(prior_cov - w.transpose() * w));
    if let Some(i) = (0..n).find(|&i| !(covariance[(i, i)] >= 0.0)) {
        return Err(Error::NotPositiveDefinite {
            pivot: i,
            value: covariance[(i, i)],
        });
    }
    Ok(GaussianPosterior { mean, covariance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglik_values() {
        let noise = NoiseModel::new(vec![(2, 0.5), (1, 2.0)]).unwrap();
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(gaussian_loglik(&d, &d, &noise).unwrap(), 0.0);
        let one = NoiseModel::iid(1, 0.3).unwrap();
        let got = gaussian_loglik(&DVector::from_vec(vec![0.3]), &DVector::zeros(1), &one).unwrap();
        assert!((got + 0.5).abs() < 1e-15);
        let pred = DVector::from_vec(vec![0.2, 2.9, -1.0]);
        let r = &d - &pred;
        let oracle = -0.5 * r.dot(&(noise.covariance().try_inverse().unwrap() * &r));
        assert!((gaussian_loglik(&d, &pred, &noise).unwrap() - oracle).abs() < 1e-12);
        assert!(NoiseModel::iid(3, 0.0).is_err());
    }

    #[test]
    fn scalar_conjugate_update() {
        let g = DMatrix::from_element(1, 1, 1.0);
        let noise = NoiseModel::iid(1, 1.0).unwrap();
        let post = linear_gaussian_posterior(
            &g,
            &noise,
            &DVector::from_vec(vec![2.0]),
            &DVector::zeros(1),
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.covariance[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_data_returns_prior() {
        let prior = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mean = DVector::from_vec(vec![1.0, -1.0]);
        let post = linear_gaussian_posterior(
            &DMatrix::zeros(0, 2),
            &NoiseModel::new(vec![]).unwrap(),
            &DVector::zeros(0),
            &mean,
            &prior,
        )
        .unwrap();
        assert_eq!(post.mean, mean);
        assert_eq!(post.covariance, prior);
    }

    #[test]
    fn gain_form_matches_precision_form() {
        let g = DMatrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64).sin());
        let a = DMatrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).cos());
        let prior = &a * a.transpose() + DMatrix::identity(4, 4);
        let noise = NoiseModel::new(vec![(2, 0.3), (1, 0.7)]).unwrap();
        let d = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let mean = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let post = linear_gaussian_posterior(&g, &noise, &d, &mean, &prior).unwrap();
        let ge = noise.covariance().try_inverse().unwrap();
        let pinv = prior.clone().try_inverse().unwrap();
        let cov = (g.transpose() * &ge * &g + &pinv).try_inverse().unwrap();
        let m = &cov * (g.transpose() * &ge * &d + &pinv * &mean);
        assert!((post.covariance - cov).amax() < 1e-10);
        assert!((post.mean - m).amax() < 1e-10);
    }
}
