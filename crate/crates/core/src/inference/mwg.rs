use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::family::{ChainRng, PriorFamily};
use super::likelihood::{gaussian_loglik, NoiseModel};
use super::metropolis::{AdaptationConfig, AdaptiveMetropolis};
use crate::error::{Error, Result};
use crate::forward_models::ForwardModel;
use crate::joint_prior::correlation_prior_logdensity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MwgConfig {
    /// Iterations including burn-in.
    pub total_samples: usize,
    pub burn_in: usize,
    pub gamma_steps_per_s_step: usize,
    pub gamma_proposal_std: f64,
    pub adaptation: AdaptationConfig,
    pub seed: u64,
    /// State coordinates whose traces are kept.
    pub track: Vec<usize>,
    /// Keep every retained state (memory `O(M n)`).
    pub store_states: bool,
    /// Accumulate the full sample covariance rather than only its diagonal.
    pub full_covariance: bool,
    /// Iterations between entries of the proposal-scale trace.
    pub trace_interval: usize,
}

impl Default for MwgConfig {
    fn default() -> Self {
        Self {
            total_samples: 10_000,
            burn_in: 1_000,
            gamma_steps_per_s_step: 1,
            gamma_proposal_std: 1.0,
            adaptation: AdaptationConfig::default(),
            seed: 0,
            track: Vec::new(),
            store_states: false,
            full_covariance: false,
            trace_interval: 100,
        }
    }
}

impl MwgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.burn_in >= self.total_samples {
            return Err(Error::EmptyChain {
                total: self.total_samples,
                burn_in: self.burn_in,
            });
        }
        if self.gamma_steps_per_s_step == 0 {
            return bad("gamma_steps_per_s_step must be at least 1");
        }
        if !(self.gamma_proposal_std > 0.0) || !self.gamma_proposal_std.is_finite() {
            return bad("gamma_proposal_std must be positive");
        }
        let a = &self.adaptation;
        if !(a.target_acceptance > 0.0 && a.target_acceptance < 1.0) {
            return bad("target acceptance must lie in (0, 1)");
        }
        if a.batch_size == 0 || a.refresh_interval == 0 || self.trace_interval == 0 {
            return bad("adaptation intervals must be positive");
        }
        if !(a.ridge >= 0.0) || !(a.decay > 0.0) {
            return bad("adaptation ridge and decay must be non-negative / positive");
        }
        Ok(())
    }
}

pub type MomentMap<'a> = dyn Fn(&DVector<f64>) -> DVector<f64> + Sync + 'a;

/// Everything the sampler needs to evaluate the posterior.
pub struct MwgProblem<'a> {
    pub model: &'a dyn ForwardModel,
    pub family: &'a dyn PriorFamily,
    pub noise: &'a NoiseModel,
    pub data: &'a DVector<f64>,
    /// Applied to each retained state before accumulating moments.
    pub moment_map: Option<&'a MomentMap<'a>>,
}

#[derive(Debug, Clone, Default)]
pub struct MwgInit {
    pub state: Option<DVector<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub proposal_factor: Option<DMatrix<f64>>,
}

/// Welford accumulator for mean and (co)variance.
#[derive(Debug, Clone)]
pub struct RunningMoments {
    count: usize,
    mean: DVector<f64>,
    m2_diag: DVector<f64>,
    m2_full: Option<DMatrix<f64>>,
}

impl RunningMoments {
    pub fn new(dim: usize, full: bool) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            m2_diag: DVector::zeros(dim),
            m2_full: full.then(|| DMatrix::zeros(dim, dim)),
        }
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.count += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = x - &self.mean;
        self.m2_diag += delta.component_mul(&delta2);
        if let Some(m2) = &mut self.m2_full {
            m2.ger(1.0, &delta, &delta2, 1.0);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Population variance (`1/M`).
    pub fn variance(&self) -> DVector<f64> {
        &self.m2_diag / self.count.max(1) as f64
    }

    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        self.m2_full.as_ref().map(|m2| {
            let c = m2 / self.count.max(1) as f64;
            (&c + c.transpose()) * 0.5
        })
    }
}

/// Retained output of [`mwg_run`].
#[derive(Debug, Clone)]
pub struct Chain {
    pub total_samples: usize,
    pub burn_in: usize,
    /// `gamma[l][k]`: coordinate `l` at retained sample `k`.
    pub gamma: Vec<Vec<f64>>,
    /// Traces of the tracked state coordinates, in `MwgConfig::track` order.
    pub tracked: Vec<Vec<f64>>,
    pub states: Option<Vec<DVector<f64>>>,
    pub moments: RunningMoments,
    pub exact_gibbs: bool,
    pub s_accepted: usize,
    pub s_proposed: usize,
    pub gamma_accepted: usize,
    pub gamma_proposed: usize,
    pub nonfinite_rejections: usize,
    /// `(iteration, τ)` snapshots of the state proposal scale.
    pub tau_trace: Vec<(usize, f64)>,
    pub final_state: DVector<f64>,
    pub final_gamma: Vec<f64>,
}

impl Chain {
    pub fn retained(&self) -> usize {
        self.total_samples - self.burn_in
    }

    pub fn s_acceptance(&self) -> f64 {
        self.s_accepted as f64 / self.s_proposed.max(1) as f64
    }

    pub fn gamma_acceptance(&self) -> f64 {
        self.gamma_accepted as f64 / self.gamma_proposed.max(1) as f64
    }

    /// Retained samples of `c_l = tanh γ_l`.
    pub fn correlation_trace(&self, l: usize) -> Vec<f64> {
        self.gamma[l].iter().map(|g| g.tanh()).collect()
    }
}

/// Unnormalised `ln π(s, γ | d)`: likelihood plus conditional prior plus correlation prior.
pub fn log_posterior(problem: &MwgProblem<'_>, s: &DVector<f64>, gamma: &[f64]) -> Result<f64> {
    let pred = problem.model.evaluate(s)?;
    Ok(gaussian_loglik(problem.data, &pred, problem.noise)?
        + problem.family.log_density(s, gamma)?
        + correlation_prior_logdensity(gamma))
}

fn loglik_or_neg_inf(problem: &MwgProblem<'_>, s: &DVector<f64>) -> f64 {
    match problem.model.evaluate(s) {
        Ok(pred) => gaussian_loglik(problem.data, &pred, problem.noise).unwrap_or(f64::NEG_INFINITY),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Adaptive Metropolis-within-Gibbs. Each iteration updates `s` once (an exact
/// conditional draw for linear models, an adaptive random-walk step otherwise)
/// followed by `gamma_steps_per_s_step` random-walk steps on `γ`.
pub fn mwg_run(problem: &MwgProblem<'_>, cfg: &MwgConfig, init: MwgInit) -> Result<Chain> {
    cfg.validate()?;
    let family = problem.family;
    let n = family.dim();
    let ng = family.n_gamma();
    if problem.model.input_dim() != n {
        return Err(Error::shape("forward model input", n, problem.model.input_dim()));
    }
    if problem.data.len() != problem.noise.len() || problem.model.output_dim() != problem.data.len() {
        return Err(Error::shape("data", problem.model.output_dim(), problem.data.len()));
    }
    let mut s = init.state.unwrap_or_else(|| family.mean());
    let mut gamma = init.gamma.unwrap_or_else(|| vec![0.0; ng]);
    if s.len() != n {
        return Err(Error::shape("initial state", n, s.len()));
    }
    if gamma.len() != ng {
        return Err(Error::shape("initial correlation coordinates", ng, gamma.len()));
    }
    if let Some(&i) = cfg.track.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!("tracked index {i} out of range for dimension {n}")));
    }
    let initial = log_posterior(problem, &s, &gamma)?;
    if !initial.is_finite() {
        return Err(Error::NonFinite(format!("posterior at initial state ({initial})")));
    }

    let mut rng = ChainRng::seed_from_u64(cfg.seed);
    let linear = problem.model.linear_matrix();
    let mut gibbs = match &linear {
        Some(g) => Some(family.gibbs_kernel(g, problem.noise, problem.data)?),
        None => None,
    };
    let mut am = AdaptiveMetropolis::new(n, cfg.adaptation, init.proposal_factor);

    let retained = cfg.total_samples - cfg.burn_in;
    let moment_dim = match problem.moment_map {
        Some(f) => f(&s).len(),
        None => n,
    };
    let mut chain = Chain {
        total_samples: cfg.total_samples,
        burn_in: cfg.burn_in,
        gamma: vec![Vec::with_capacity(retained); ng],
        tracked: vec![Vec::with_capacity(retained); cfg.track.len()],
        states: cfg.store_states.then(|| Vec::with_capacity(retained)),
        moments: RunningMoments::new(moment_dim, cfg.full_covariance),
        exact_gibbs: gibbs.is_some(),
        s_accepted: 0,
        s_proposed: 0,
        gamma_accepted: 0,
        gamma_proposed: 0,
        nonfinite_rejections: 0,
        tau_trace: Vec::new(),
        final_state: DVector::zeros(0),
        final_gamma: Vec::new(),
    };

    let mut loglik = loglik_or_neg_inf(problem, &s);
    for it in 0..cfg.total_samples {
        // s | γ
        match gibbs.as_mut() {
            Some(kernel) => {
                s = kernel.draw(&gamma, &mut rng)?;
                chain.s_accepted += 1;
                chain.s_proposed += 1;
            }
            None => {
                let prior = family.state_target(&gamma)?;
                let mut lp = loglik + prior(&s);
                let mut ll_prop = loglik;
                let mut target = |x: &DVector<f64>| {
                    let pr = prior(x);
                    if !pr.is_finite() {
                        return f64::NEG_INFINITY;
                    }
                    ll_prop = loglik_or_neg_inf(problem, x);
                    ll_prop + pr
                };
                let accepted = am.step(&mut s, &mut lp, &mut target, &mut rng, it < cfg.burn_in);
                if accepted {
                    loglik = ll_prop;
                }
                chain.s_accepted += accepted as usize;
                chain.s_proposed += 1;
                if it % cfg.trace_interval == 0 {
                    chain.tau_trace.push((it, am.tau()));
                }
            }
        }

        // γ | s
        if ng > 0 {
            let cond = family.correlation_target(&s)?;
            let target = |g: &[f64]| {
                let v = cond(g);
                if v.is_finite() {
                    v + correlation_prior_logdensity(g)
                } else {
                    f64::NEG_INFINITY
                }
            };
            let mut current = target(&gamma);
            let mut proposal = gamma.clone();
            for _ in 0..cfg.gamma_steps_per_s_step {
                for (x, g) in proposal.iter_mut().zip(&gamma) {
                    *x = g + cfg.gamma_proposal_std * rng.sample::<f64, _>(StandardNormal);
                }
                let lp = target(&proposal);
                let u: f64 = rng.random();
                chain.gamma_proposed += 1;
                if lp.is_finite() && u.ln() < lp - current {
                    gamma.copy_from_slice(&proposal);
                    current = lp;
                    chain.gamma_accepted += 1;
                }
            }
        }

        if it >= cfg.burn_in {
            for (l, g) in gamma.iter().enumerate() {
                chain.gamma[l].push(*g);
            }
            for (t, &i) in cfg.track.iter().enumerate() {
                chain.tracked[t].push(s[i]);
            }
            match problem.moment_map {
                Some(f) => chain.moments.push(&f(&s)),
                None => chain.moments.push(&s),
            }
            if let Some(states) = &mut chain.states {
                states.push(s.clone());
            }
        }
    }
    chain.nonfinite_rejections = am.nonfinite_rejections();
    chain.final_state = s;
    chain.final_gamma = gamma;
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{whitening_filter, FilterKind};
    use crate::forward_models::{CokrigeModel, MonodModel};
    use crate::inference::family::{CorrelationStructure, JointPriorFamily};
    use crate::inference::likelihood::linear_gaussian_posterior;
    use crate::joint_prior::Contraction;
    use crate::linalg::SpdMatrix;
    use crate::mesh_fem::PointObservation;
    use std::sync::Arc;

    fn scalar_family(c: Option<f64>, sp: f64, sm: f64, mp: f64, mm: f64) -> JointPriorFamily {
        let fp = Arc::new(whitening_filter(&SpdMatrix::from_diagonal(&[sp * sp]).unwrap(), FilterKind::Cholesky).unwrap());
        let fm = Arc::new(whitening_filter(&SpdMatrix::from_diagonal(&[sm * sm]).unwrap(), FilterKind::Cholesky).unwrap());
        let structure = match c {
            Some(c) => CorrelationStructure::Fixed(Contraction::scalar(c, 1, 1).unwrap()),
            None => CorrelationStructure::Free(Contraction::scalar(0.0, 1, 1).unwrap()),
        };
        JointPriorFamily::new(fp, fm, DVector::from_element(1, mp), DVector::from_element(1, mm), structure).unwrap()
    }

    fn identity_obs(n: usize) -> PointObservation {
        let nodes: Vec<_> = (0..n).map(|i| [i as f64, 0.0]).collect();
        PointObservation::from_indices(n, (0..n).collect(), &nodes).unwrap()
    }

    #[test]
    fn config_validation() {
        let cfg = MwgConfig {
            total_samples: 10,
            burn_in: 10,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::EmptyChain { .. })));
        let cfg = MwgConfig {
            gamma_steps_per_s_step: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_chain_is_an_error() {
        let fam = scalar_family(Some(0.5), 1.0, 1.0, 0.0, 0.0);
        let model = CokrigeModel::new(identity_obs(1), identity_obs(1));
        let noise = NoiseModel::iid(2, 1.0).unwrap();
        let d = DVector::zeros(2);
        let problem = MwgProblem {
            model: &model,
            family: &fam,
            noise: &noise,
            data: &d,
            moment_map: None,
        };
        let cfg = MwgConfig {
            total_samples: 5,
            burn_in: 5,
            ..Default::default()
        };
        assert!(matches!(mwg_run(&problem, &cfg, MwgInit::default()), Err(Error::EmptyChain { .. })));
    }

    #[test]
    fn nonfinite_initial_state_is_an_error() {
        let fam = scalar_family(None, 0.1, 10.0, 0.4, 40.0);
        let model = MonodModel::new(vec![28.0]);
        let noise = NoiseModel::iid(1, 0.1).unwrap();
        let d = DVector::from_element(1, 0.3);
        let problem = MwgProblem {
            model: &model,
            family: &fam,
            noise: &noise,
            data: &d,
            moment_map: None,
        };
        let init = MwgInit {
            state: Some(DVector::from_vec(vec![0.4, -28.0])),
            ..Default::default()
        };
        assert!(mwg_run(&problem, &MwgConfig::default(), init).is_err());
    }

    #[test]
    fn linear_fixed_c_matches_analytic_posterior() {
        let fam = scalar_family(Some(0.6), 1.0, 2.0, 0.5, -1.0);
        let model = CokrigeModel::new(identity_obs(1), identity_obs(1));
        let noise = NoiseModel::new(vec![(1, 0.7), (1, 1.5)]).unwrap();
        let d = DVector::from_vec(vec![1.0, 0.5]);
        let problem = MwgProblem {
            model: &model,
            family: &fam,
            noise: &noise,
            data: &d,
            moment_map: None,
        };
        let cfg = MwgConfig {
            total_samples: 101_000,
            burn_in: 1_000,
            full_covariance: true,
            seed: 3,
            ..Default::default()
        };
        let chain = mwg_run(&problem, &cfg, MwgInit::default()).unwrap();
        assert!(chain.exact_gibbs);
        let g = model.linear_matrix().unwrap();
        let post = linear_gaussian_posterior(&g, &noise, &d, &fam.mean(), &fam.covariance(&[]).unwrap()).unwrap();
        assert!((chain.moments.mean() - &post.mean).amax() < 0.02);
        assert!((chain.moments.covariance().unwrap() - &post.covariance).amax() < 0.02);
    }

    #[test]
    fn nonlinear_path_uses_adaptive_metropolis_and_is_reproducible() {
        let fam = scalar_family(None, 0.1, 10.0, 0.4, 40.0);
        let model = MonodModel::new(vec![28.0, 55.0, 83.0, 110.0, 138.0]);
        let noise = NoiseModel::iid(5, 0.1).unwrap();
        let d = crate::forward_models::monod_forward(0.7, 65.0, model.substrate()).unwrap();
        let problem = MwgProblem {
            model: &model,
            family: &fam,
            noise: &noise,
            data: &d,
            moment_map: None,
        };
        let cfg = MwgConfig {
            total_samples: 4_000,
            burn_in: 1_000,
            track: vec![0, 1],
            seed: 11,
            ..Default::default()
        };
        let a = mwg_run(&problem, &cfg, MwgInit::default()).unwrap();
        let b = mwg_run(&problem, &cfg, MwgInit::default()).unwrap();
        assert!(!a.exact_gibbs);
        assert_eq!(a.retained(), 3_000);
        assert_eq!(a.gamma[0].len(), 3_000);
        assert_eq!(a.gamma, b.gamma);
        assert_eq!(a.tracked, b.tracked);
        assert!(a.s_acceptance() > 0.05 && a.s_acceptance() < 0.8);
        assert!(!a.tau_trace.is_empty());
    }

    #[test]
    fn targets_factorise_the_posterior() {
        let fam = scalar_family(None, 0.1, 10.0, 0.4, 40.0);
        let model = MonodModel::new(vec![28.0, 55.0, 83.0]);
        let noise = NoiseModel::iid(3, 0.1).unwrap();
        let d = DVector::from_vec(vec![0.2, 0.3, 0.4]);
        let problem = MwgProblem {
            model: &model,
            family: &fam,
            noise: &noise,
            data: &d,
            moment_map: None,
        };
        let mut rng = ChainRng::seed_from_u64(5);
        for _ in 0..20 {
            let s1 = DVector::from_vec(vec![rng.random_range(0.1..1.0), rng.random_range(10.0..90.0)]);
            let s2 = DVector::from_vec(vec![rng.random_range(0.1..1.0), rng.random_range(10.0..90.0)]);
            let g1 = [rng.random_range(-3.0..3.0)];
            let g2 = [rng.random_range(-3.0..3.0)];
            let full = |s: &DVector<f64>, g: &[f64]| log_posterior(&problem, s, g).unwrap();
            let st = fam.state_target(&g1).unwrap();
            let ds = loglik_or_neg_inf(&problem, &s1) + st(&s1) - loglik_or_neg_inf(&problem, &s2) - st(&s2);
            assert!((ds - (full(&s1, &g1) - full(&s2, &g1))).abs() < 1e-8);
            let ct = fam.correlation_target(&s1).unwrap();
            let dg = ct(&g1) + correlation_prior_logdensity(&g1) - ct(&g2) - correlation_prior_logdensity(&g2);
            assert!((dg - (full(&s1, &g1) - full(&s1, &g2))).abs() < 1e-8);
        }
    }
}
