//! Realised cross-correlation under Cholesky versus principal-root filters
//! for two identical 1D marginals and a split-sign target.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{line_points, sqexp_covariance, whitening_filter, FilterKind, KernelConfig};
use crate::error::{Error, Result};
use crate::joint_prior::{split, Contraction, JointPrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorCompareConfig {
    pub points: usize,
    pub length: f64,
    pub kernel: KernelConfig,
    pub correlation: f64,
    pub split_x: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for FactorCompareConfig {
    fn default() -> Self {
        Self {
            points: 100,
            length: 1.0,
            kernel: KernelConfig::new(0.1),
            correlation: 0.999,
            split_x: 0.5,
            samples: 3,
            seed: 7,
        }
    }
}

impl FactorCompareConfig {
    pub fn scaled(mut self, factor: f64) -> Self {
        self.points = ((self.points as f64 * factor).round() as usize).max(2);
        self
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kind: FilterKind,
    /// `diag Φ`, the realised pointwise correlation.
    pub phi_diag: Vec<f64>,
    pub p_samples: Vec<DVector<f64>>,
    pub m_samples: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct FactorCompareResult {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    pub outcomes: Vec<FilterOutcome>,
}

pub fn run(cfg: &FactorCompareConfig) -> Result<FactorCompareResult> {
    if cfg.points < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let pts = line_points(cfg.points, cfg.length);
    let gamma = sqexp_covariance(&pts, &cfg.kernel)?;
    let n = pts.len();
    let x: Vec<f64> = pts.iter().map(|p| p[0]).collect();
    let labels: Vec<usize> = x.iter().map(|&v| usize::from(v > cfg.split_x)).collect();
    let target = labels.iter().map(|&l| if l == 0 { cfg.correlation } else { -cfg.correlation }).collect();
    let c = Contraction::piecewise(labels, vec![cfg.correlation, -cfg.correlation])?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let etas: Vec<DVector<f64>> = (0..cfg.samples)
        .map(|_| DVector::from_fn(2 * n, |_, _| rng.sample(StandardNormal)))
        .collect();
    let var = gamma.matrix().diagonal();
    let mut outcomes = Vec::new();
    for kind in [FilterKind::PrincipalSqrt, FilterKind::Cholesky] {
        let f = Arc::new(whitening_filter(&gamma, kind)?);
        let prior = JointPrior::centred(f.clone(), f, c.clone())?;
        let cross = prior.cross_covariance_dense();
        let phi_diag = (0..n).map(|i| cross[(i, i)] / var[i]).collect();
        let mut p_samples = Vec::new();
        let mut m_samples = Vec::new();
        for eta in &etas {
            let (p, m) = split(&prior.sample_from(eta)?, n);
            p_samples.push(p);
            m_samples.push(m);
        }
        outcomes.push(FilterOutcome {
            kind,
            phi_diag,
            p_samples,
            m_samples,
        });
    }
    Ok(FactorCompareResult { x, target, outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_root_is_mirror_symmetric_and_cholesky_is_not() {
        let r = run(&FactorCompareConfig::default()).unwrap();
        let sqrt = &r.outcomes[0].phi_diag;
        let chol = &r.outcomes[1].phi_diag;
        let n = sqrt.len();
        let asym = |v: &[f64]| (0..n).map(|i| (v[i] + v[n - 1 - i]).abs()).fold(0.0, f64::max);
        assert!(asym(sqrt) < 1e-6, "{}", asym(sqrt));
        assert!(asym(chol) > 0.1);
        // Principal root keeps the intended sign away from the switch.
        for i in 0..n {
            if (r.x[i] - 0.5).abs() > 0.15 {
                assert_eq!(sqrt[i].signum(), r.target[i].signum());
            }
        }
        let positive = |v: &[f64]| v.iter().filter(|&&x| x > 0.0).count();
        assert!(positive(chol) > positive(sqrt));
    }
}
