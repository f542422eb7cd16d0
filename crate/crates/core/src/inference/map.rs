use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::likelihood::{gaussian_loglik, NoiseModel};
use crate::error::{Error, Result};
use crate::forward_models::{fd_jacobian, ForwardModel, DEFAULT_H_REL};
use crate::linalg::{self, cholesky, SpdMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussNewtonConfig {
    pub max_iterations: usize,
    /// Stop once `‖∇Φ‖ < tol (1 + ‖∇Φ₀‖)`.
    pub gradient_tol: f64,
    pub max_halvings: usize,
    pub h_rel: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tol: 1e-8,
            max_halvings: 30,
            h_rel: DEFAULT_H_REL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapEstimate {
    pub point: DVector<f64>,
    /// `(JᵀΓ_e⁻¹J + Γ₀⁻¹)⁻¹` at `point`.
    pub laplace_covariance: DMatrix<f64>,
    /// Lower Cholesky factor of `laplace_covariance`.
    pub laplace_factor: DMatrix<f64>,
    pub iterations: usize,
    /// Objective after each accepted iterate, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub gradient_norm: f64,
}

/// Gauss-Newton with backtracking on
/// `Φ(s) = ½‖d − G(s)‖²_{Γ_e⁻¹} + ½‖s − s*‖²_{Γ₀⁻¹}`.
pub fn gauss_newton_map(
    model: &dyn ForwardModel,
    prior_mean: &DVector<f64>,
    prior_cov: &SpdMatrix,
    noise: &NoiseModel,
    data: &DVector<f64>,
    init: &DVector<f64>,
    cfg: &GaussNewtonConfig,
) -> Result<MapEstimate> {
    let n = model.input_dim();
    if prior_mean.len() != n || prior_cov.dim() != n || init.len() != n {
        return Err(Error::shape("map estimate", n, init.len()));
    }
    if data.len() != noise.len() || data.len() != model.output_dim() {
        return Err(Error::shape("map data", model.output_dim(), data.len()));
    }
    let precision = prior_cov.factor().inverse();
    let weights = noise.std_devs().map(|s| 1.0 / (s * s));
    let linear = model.linear_matrix();

    let objective = |s: &DVector<f64>| -> Result<f64> {
        let pred = model.evaluate(s)?;
        let r = s - prior_mean;
        Ok(-gaussian_loglik(data, &pred, noise)? + 0.5 * r.dot(&(&precision * &r)))
    };
    let jacobian = |s: &DVector<f64>| -> Result<DMatrix<f64>> {
        match &linear {
            Some(g) => Ok(g.clone()),
            None => fd_jacobian(model, s, cfg.h_rel),
        }
    };
    // Gradient and Gauss-Newton Hessian of Φ.
    let linearise = |s: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let j = jacobian(s)?;
        let resid = data - model.evaluate(s)?;
        let wj = DMatrix::from_fn(j.nrows(), j.ncols(), |i, k| weights[i] * j[(i, k)]);
        let grad = -wj.tr_mul(&resid) + &precision * (s - prior_mean);
        let hess = linalg::symmetrize(&(j.tr_mul(&wj) + &precision));
        Ok((grad, hess))
    };

    let mut s = init.clone();
    let mut phi = objective(&s)?;
    if !phi.is_finite() {
        return Err(Error::NonFinite("objective at initial point".into()));
    }
    let mut trace = vec![phi];
    let (mut grad, mut hess) = linearise(&s)?;
    let threshold = cfg.gradient_tol * (1.0 + grad.norm());
    let mut iterations = 0;
    while grad.norm() >= threshold && iterations < cfg.max_iterations {
        let step = -cholesky(&hess)?.solve(&grad);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = &s + &step * alpha;
            if let Ok(v) = objective(&trial) {
                if v.is_finite() && v <= phi {
                    accepted = Some((trial, v));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((next, v)) = accepted else {
            // Stalled at round-off level: the current point is as good as it gets.
            if step.norm() <= 1e-12 * (1.0 + s.norm()) {
                break;
            }
            return Err(Error::LineSearch {
                halvings: cfg.max_halvings,
                gradient_norm: grad.norm(),
                last_iterate: s.iter().copied().collect(),
            });
        };
        s = next;
        phi = v;
        trace.push(phi);
        iterations += 1;
        (grad, hess) = linearise(&s)?;
    }
    let factor = cholesky(&hess)?;
    let laplace_covariance = linalg::symmetrize(&factor.inverse());
    let laplace_factor = cholesky(&laplace_covariance)?.into_lower();
    Ok(MapEstimate {
        point: s,
        laplace_covariance,
        laplace_factor,
        iterations,
        objective_trace: trace,
        gradient_norm: grad.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::{monod_forward, MonodModel};
    use crate::inference::likelihood::linear_gaussian_posterior;
    use rand::SeedableRng;

    struct Linear(DMatrix<f64>);

    impl ForwardModel for Linear {
        fn input_dim(&self) -> usize {
            self.0.ncols()
        }
        fn output_dim(&self) -> usize {
            self.0.nrows()
        }
        fn evaluate(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.0 * s)
        }
        fn linear_matrix(&self) -> Option<DMatrix<f64>> {
            Some(self.0.clone())
        }
    }

    #[test]
    fn linear_model_converges_in_one_step() {
        let g = DMatrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.9).cos());
        let a = DMatrix::from_fn(4, 4, |i, j| ((i + 3 * j) as f64).sin());
        let prior = SpdMatrix::from_symmetrized(&a * a.transpose() + DMatrix::identity(4, 4)).unwrap();
        let mean = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.0]);
        let noise = NoiseModel::iid(3, 0.4).unwrap();
        let d = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let est = gauss_newton_map(&Linear(g.clone()), &mean, &prior, &noise, &d, &DVector::zeros(4), &GaussNewtonConfig::default()).unwrap();
        let post = linear_gaussian_posterior(&g, &noise, &d, &mean, prior.matrix()).unwrap();
        assert_eq!(est.iterations, 1);
        assert!((est.point - &post.mean).amax() < 1e-8);
        assert!((est.laplace_covariance - &post.covariance).amax() < 1e-8);
    }

    #[test]
    fn monod_map_is_consistent_with_truth() {
        let model = MonodModel::new(vec![28.0, 55.0, 83.0, 110.0, 138.0, 225.0, 375.0]);
        let noise = NoiseModel::iid(7, 0.03).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let d = monod_forward(0.7, 65.0, model.substrate()).unwrap() + noise.sample(&mut rng);
        let mean = DVector::from_vec(vec![0.4, 40.0]);
        let prior = SpdMatrix::from_diagonal(&[0.01, 100.0]).unwrap();
        let est = gauss_newton_map(&model, &mean, &prior, &noise, &d, &mean, &GaussNewtonConfig::default()).unwrap();
        for w in est.objective_trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let truth = DVector::from_vec(vec![0.7, 65.0]);
        let r = &est.point - truth;
        let maha = r.dot(&(est.laplace_covariance.clone().try_inverse().unwrap() * &r));
        // 99% quantile of χ²₂.
        assert!(maha < 9.21, "mahalanobis {maha}");
    }
}
