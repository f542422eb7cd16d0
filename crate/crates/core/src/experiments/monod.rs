//! Two-parameter Monod inversion: fixed-correlation posterior scans on a grid
//! and a full MCMC over `(p, m, c)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{whitening_filter, FilterKind, WhiteningFilter};
use crate::diagnostics::{ess, mass_where};
use crate::error::{Error, Result};
use crate::forward_models::{ForwardModel, MonodModel};
use crate::inference::{
    gauss_newton_map, gaussian_loglik, mwg_run, CorrelationStructure, GaussNewtonConfig, JointPriorFamily, MapEstimate,
    MwgConfig, MwgInit, MwgProblem, NoiseModel,
};
use crate::joint_prior::Contraction;
use crate::linalg::SpdMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityGrid {
    pub p: [f64; 2],
    pub m: [f64; 2],
    pub points: [usize; 2],
}

impl DensityGrid {
    pub fn p_values(&self) -> Vec<f64> {
        linspace(self.p, self.points[0])
    }

    pub fn m_values(&self) -> Vec<f64> {
        linspace(self.m, self.points[1])
    }

    fn cell_area(&self) -> f64 {
        (self.p[1] - self.p[0]) / (self.points[0] - 1) as f64 * (self.m[1] - self.m[0]) / (self.points[1] - 1) as f64
    }
}

fn linspace(r: [f64; 2], n: usize) -> Vec<f64> {
    (0..n).map(|i| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonodConfig {
    pub substrate: Vec<f64>,
    pub prior_mean: [f64; 2],
    pub prior_std: [f64; 2],
    pub truth: [f64; 2],
    pub noise_levels: Vec<f64>,
    pub scan_correlations: Vec<f64>,
    pub grid: DensityGrid,
    pub seed: u64,
    /// Noise level used for the MCMC with unknown correlation.
    pub mcmc_noise: f64,
    /// `mcmc.seed` is ignored; the chain seed derives from `seed`.
    pub mcmc: MwgConfig,
}

impl Default for MonodConfig {
    fn default() -> Self {
        Self {
            substrate: vec![28.0, 55.0, 83.0, 110.0, 138.0, 225.0, 375.0],
            prior_mean: [0.4, 40.0],
            prior_std: [0.1, 10.0],
            truth: [0.7, 65.0],
            noise_levels: vec![0.1, 0.03],
            scan_correlations: vec![-0.99, -0.85, 0.0, 0.85, 0.99],
            grid: DensityGrid {
                p: [0.0, 1.5],
                m: [-20.0, 200.0],
                points: [301, 301],
            },
            seed: 1,
            mcmc_noise: 0.03,
            mcmc: MwgConfig {
                total_samples: 100_000,
                burn_in: 10_000,
                track: vec![0, 1],
                ..MwgConfig::default()
            },
        }
    }
}

impl MonodConfig {
    fn validate(&self) -> Result<()> {
        if self.grid.points[0] < 2 || self.grid.points[1] < 2 {
            return Err(Error::InvalidArgument("density grid needs at least 2 points per axis".into()));
        }
        if self.substrate.is_empty() {
            return Err(Error::InvalidArgument("no substrate concentrations".into()));
        }
        if self.noise_levels.iter().chain([&self.mcmc_noise]).any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidArgument("noise levels must be positive".into()));
        }
        self.mcmc.validate()
    }
}

/// One fixed-correlation posterior on the grid.
#[derive(Debug, Clone)]
pub struct ScanEntry {
    pub correlation: f64,
    /// Normalised log posterior density at the truth.
    pub log_density_at_truth: f64,
    /// `grid[(i, j)]` at `(p_i, m_j)`, normalised over the grid.
    pub log_posterior_grid: DMatrix<f64>,
    pub log_prior_grid: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct NoiseScan {
    pub noise: f64,
    pub data: DVector<f64>,
    pub entries: Vec<ScanEntry>,
    pub best_correlation: f64,
}

#[derive(Debug, Clone)]
pub struct MonodChainSummary {
    pub map: MapEstimate,
    pub data: DVector<f64>,
    pub p: Vec<f64>,
    pub m: Vec<f64>,
    pub c: Vec<f64>,
    pub positive_mass: f64,
    pub s_acceptance: f64,
    pub gamma_acceptance: f64,
    pub ess_c: f64,
}

#[derive(Debug, Clone)]
pub struct MonodResult {
    pub standard_noise: DVector<f64>,
    pub scans: Vec<NoiseScan>,
    pub chain: Option<MonodChainSummary>,
}

struct Setup {
    model: MonodModel,
    fp: Arc<WhiteningFilter>,
    fm: Arc<WhiteningFilter>,
    mean_p: DVector<f64>,
    mean_m: DVector<f64>,
}

impl Setup {
    fn new(cfg: &MonodConfig) -> Result<Self> {
        let [sp, sm] = cfg.prior_std;
        Ok(Self {
            model: MonodModel::new(cfg.substrate.clone()),
            fp: Arc::new(whitening_filter(&SpdMatrix::from_diagonal(&[sp * sp])?, FilterKind::Cholesky)?),
            fm: Arc::new(whitening_filter(&SpdMatrix::from_diagonal(&[sm * sm])?, FilterKind::Cholesky)?),
            mean_p: DVector::from_element(1, cfg.prior_mean[0]),
            mean_m: DVector::from_element(1, cfg.prior_mean[1]),
        })
    }

    fn family(&self, structure: CorrelationStructure) -> Result<JointPriorFamily> {
        JointPriorFamily::new(self.fp.clone(), self.fm.clone(), self.mean_p.clone(), self.mean_m.clone(), structure)
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn scan(cfg: &MonodConfig, setup: &Setup, noise: f64, data: &DVector<f64>) -> Result<NoiseScan> {
    let noise_model = NoiseModel::iid(data.len(), noise)?;
    let (ps, ms) = (cfg.grid.p_values(), cfg.grid.m_values());
    let ln_cell = cfg.grid.cell_area().ln();
    let mut entries = Vec::new();
    for &c in &cfg.scan_correlations {
        let prior = setup.family(CorrelationStructure::Fixed(Contraction::scalar(c, 1, 1)?))?.prior(&[])?;
        let eval = |p: f64, m: f64| -> (f64, f64) {
            let s = DVector::from_vec(vec![p, m]);
            let lp = prior.log_density(&s, true).unwrap_or(f64::NEG_INFINITY);
            let ll = setup
                .model
                .evaluate(&s)
                .and_then(|pred| gaussian_loglik(data, &pred, &noise_model))
                .unwrap_or(f64::NEG_INFINITY);
            (lp, lp + ll)
        };
        let mut post = DMatrix::zeros(ps.len(), ms.len());
        let mut pri = DMatrix::zeros(ps.len(), ms.len());
        for (i, &p) in ps.iter().enumerate() {
            for (j, &m) in ms.iter().enumerate() {
                let (a, b) = eval(p, m);
                pri[(i, j)] = a;
                post[(i, j)] = b;
            }
        }
        let z_post = log_sum_exp(post.iter().copied()) + ln_cell;
        let z_pri = log_sum_exp(pri.iter().copied()) + ln_cell;
        post.add_scalar_mut(-z_post);
        pri.add_scalar_mut(-z_pri);
        let at_truth = eval(cfg.truth[0], cfg.truth[1]).1 - z_post;
        entries.push(ScanEntry {
            correlation: c,
            log_density_at_truth: at_truth,
            log_posterior_grid: post,
            log_prior_grid: pri,
        });
    }
    let best_correlation = entries
        .iter()
        .max_by(|a, b| a.log_density_at_truth.total_cmp(&b.log_density_at_truth))
        .map(|e| e.correlation)
        .unwrap_or(f64::NAN);
    Ok(NoiseScan {
        noise,
        data: data.clone(),
        entries,
        best_correlation,
    })
}

/// Data at every noise level share one standard-normal draw, `d = G(truth) + δ ε`.
pub fn run(cfg: &MonodConfig, with_mcmc: bool) -> Result<MonodResult> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = DVector::from_fn(cfg.substrate.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let clean = setup.model.evaluate(&DVector::from_vec(cfg.truth.to_vec()))?;
    let scans = cfg
        .noise_levels
        .iter()
        .map(|&delta| scan(cfg, &setup, delta, &(&clean + &eps * delta)))
        .collect::<Result<Vec<_>>>()?;

    let chain = if with_mcmc {
        let data = &clean + &eps * cfg.mcmc_noise;
        let noise = NoiseModel::iid(data.len(), cfg.mcmc_noise)?;
        let mean = DVector::from_vec(cfg.prior_mean.to_vec());
        let prior_cov = SpdMatrix::from_diagonal(&[cfg.prior_std[0].powi(2), cfg.prior_std[1].powi(2)])?;
        let map = gauss_newton_map(&setup.model, &mean, &prior_cov, &noise, &data, &mean, &GaussNewtonConfig::default())?;
        let family = setup.family(CorrelationStructure::Free(Contraction::scalar(0.0, 1, 1)?))?;
        let problem = MwgProblem {
            model: &setup.model,
            family: &family,
            noise: &noise,
            data: &data,
            moment_map: None,
        };
        let mut mcfg = cfg.mcmc.clone();
        mcfg.track = vec![0, 1];
        mcfg.seed = super::stream_seed(cfg.seed, 1);
        let init = MwgInit {
            state: Some(map.point.clone()),
            gamma: None,
            proposal_factor: Some(map.laplace_factor.clone()),
        };
        let ch = mwg_run(&problem, &mcfg, init)?;
        let c = ch.correlation_trace(0);
        Some(MonodChainSummary {
            positive_mass: mass_where(&c, |v| v > 0.0),
            ess_c: ess(&c).unwrap_or(f64::NAN),
            s_acceptance: ch.s_acceptance(),
            gamma_acceptance: ch.gamma_acceptance(),
            p: ch.tracked[0].clone(),
            m: ch.tracked[1].clone(),
            c,
            map,
            data,
        })
    } else {
        None
    };
    Ok(MonodResult {
        standard_noise: eps,
        scans,
        chain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_posteriors_are_normalised() {
        let mut cfg = MonodConfig::default();
        cfg.grid.points = [121, 121];
        let r = run(&cfg, false).unwrap();
        assert_eq!(r.scans.len(), 2);
        let area = cfg.grid.cell_area();
        for scan in &r.scans {
            assert_eq!(scan.entries.len(), 5);
            for e in &scan.entries {
                let mass: f64 = e.log_posterior_grid.iter().map(|v| v.exp()).sum::<f64>() * area;
                assert!((mass - 1.0).abs() < 1e-9);
                assert!(e.log_density_at_truth.is_finite());
            }
        }
    }

    #[test]
    fn zero_correlation_prior_matches_independent_gaussians() {
        let cfg = MonodConfig::default();
        let setup = Setup::new(&cfg).unwrap();
        let prior = setup
            .family(CorrelationStructure::Fixed(Contraction::zero(1, 1)))
            .unwrap()
            .prior(&[])
            .unwrap();
        let s = DVector::from_vec(vec![0.55, 31.0]);
        let oracle = -0.5 * ((0.15f64 / 0.1).powi(2) + (9.0f64 / 10.0).powi(2));
        assert!((prior.log_density(&s, true).unwrap() - oracle).abs() < 1e-12);
    }
}
