use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::family::ChainRng;
use crate::linalg::cholesky;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub target_acceptance: f64,
    /// Iterations per scale update.
    pub batch_size: usize,
    /// Scale updates use step `k^{-decay}` for batch `k`.
    pub decay: f64,
    /// Iterations between refreshes of the proposal factor.
    pub refresh_interval: usize,
    pub ridge: f64,
    /// Initial proposal scale; `2.38 / √d` when absent.
    pub initial_scale: Option<f64>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            target_acceptance: 0.23,
            batch_size: 50,
            decay: 0.6,
            refresh_interval: 1000,
            ridge: 1e-8,
            initial_scale: None,
        }
    }
}

/// Random-walk proposal `x' = x + τ A ζ` with adaptive `τ` and `A`.
#[derive(Debug, Clone)]
pub struct AdaptiveMetropolis {
    cfg: AdaptationConfig,
    log_tau: f64,
    factor: DMatrix<f64>,
    count: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    batch_accepted: usize,
    batch_len: usize,
    batches: usize,
    iterations: usize,
    accepted: usize,
    nonfinite: usize,
}

impl AdaptiveMetropolis {
    pub fn new(dim: usize, cfg: AdaptationConfig, initial_factor: Option<DMatrix<f64>>) -> Self {
        let tau = cfg.initial_scale.unwrap_or(2.38 / (dim.max(1) as f64).sqrt());
        Self {
            cfg,
            log_tau: tau.ln(),
            factor: initial_factor.unwrap_or_else(|| DMatrix::identity(dim, dim)),
            count: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            batch_accepted: 0,
            batch_len: 0,
            batches: 0,
            iterations: 0,
            accepted: 0,
            nonfinite: 0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.iterations.max(1) as f64
    }

    pub fn accepted(&self) -> usize {
        self.accepted
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Proposals rejected because the target was not finite.
    pub fn nonfinite_rejections(&self) -> usize {
        self.nonfinite
    }

    pub fn propose_with(&self, x: &DVector<f64>, zeta: &DVector<f64>) -> DVector<f64> {
        x + &self.factor * zeta * self.tau()
    }

    /// One Metropolis step on `x` with cached target value `logp`. Adapts the
    /// proposal when `adapt` is set. Returns whether the proposal was accepted.
    pub fn step(
        &mut self,
        x: &mut DVector<f64>,
        logp: &mut f64,
        target: &mut dyn FnMut(&DVector<f64>) -> f64,
        rng: &mut ChainRng,
        adapt: bool,
    ) -> bool {
        let zeta = DVector::from_fn(x.len(), |_, _| rng.sample(StandardNormal));
        let proposal = self.propose_with(x, &zeta);
        let lp = target(&proposal);
        let u: f64 = rng.random();
        let accept = if lp.is_finite() {
            u.ln() < lp - *logp
        } else {
            self.nonfinite += 1;
            false
        };
        if accept {
            *x = proposal;
            *logp = lp;
        }
        self.iterations += 1;
        self.accepted += accept as usize;
        if adapt {
            self.adapt(x, accept);
        }
        accept
    }

    fn adapt(&mut self, x: &DVector<f64>, accepted: bool) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.m2.ger(1.0, &delta, &delta2, 1.0);

        self.batch_len += 1;
        self.batch_accepted += accepted as usize;
        if self.batch_len == self.cfg.batch_size {
            self.batches += 1;
            let rate = self.batch_accepted as f64 / self.batch_len as f64;
            self.log_tau += (self.batches as f64).powf(-self.cfg.decay) * (rate - self.cfg.target_acceptance);
            self.batch_len = 0;
            self.batch_accepted = 0;
        }
        if self.count.is_multiple_of(self.cfg.refresh_interval) && self.count > 1 {
            let n = x.len();
            let mut cov = &self.m2 / (self.count - 1) as f64;
            cov = (&cov + cov.transpose()) * 0.5;
            for i in 0..n {
                cov[(i, i)] += self.cfg.ridge;
            }
            if let Ok(f) = cholesky(&cov) {
                self.factor = f.into_lower();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_proposal_is_accepted() {
        let am = AdaptiveMetropolis::new(3, AdaptationConfig::default(), None);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(am.propose_with(&x, &DVector::zeros(3)), x);
    }

    #[test]
    fn calibrates_on_standard_normal() {
        let mut rng = ChainRng::seed_from_u64(10);
        let mut am = AdaptiveMetropolis::new(10, AdaptationConfig::default(), None);
        let mu = DVector::from_fn(10, |i, _| i as f64 - 4.5);
        let mut target = |x: &DVector<f64>| -0.5 * (x - &mu).norm_squared();
        let mut x = DVector::zeros(10);
        let mut lp = target(&x);
        let burn = 20_000;
        let n = 100_000;
        let mut mean = DVector::zeros(10);
        let mut accepted = 0;
        for k in 0..burn + n {
            let a = am.step(&mut x, &mut lp, &mut target, &mut rng, k < burn);
            if k >= burn {
                mean += &x;
                accepted += a as usize;
            }
        }
        mean /= n as f64;
        let rate = accepted as f64 / n as f64;
        assert!((0.15..=0.35).contains(&rate), "rate {rate}");
        assert!((mean - mu).amax() < 0.05 * 2.0, "chain mean off");
    }

    #[test]
    fn nonfinite_targets_are_rejected() {
        let mut rng = ChainRng::seed_from_u64(1);
        let mut am = AdaptiveMetropolis::new(2, AdaptationConfig::default(), None);
        let mut x = DVector::zeros(2);
        let mut lp = 0.0;
        let mut target = |_: &DVector<f64>| f64::NAN;
        for _ in 0..10 {
            assert!(!am.step(&mut x, &mut lp, &mut target, &mut rng, true));
        }
        assert_eq!(am.nonfinite_rejections(), 10);
        assert_eq!(x, DVector::zeros(2));
    }
}
