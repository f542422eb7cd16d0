//! Co-kriging of two fields observed on different subdomains, with the scalar
//! cross-correlation fixed or inferred.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{range_noise_std, spread_indices, stream_seed, FieldPosterior, FieldPriorConfig, FieldPriors, GridLayout, MeshConfig};
use crate::diagnostics::{
    ess, field_metrics, histogram, mass_where, median, std_difference, FieldMetrics, MetricsReport,
};
use crate::error::{Error, Result};
use crate::forward_models::{CokrigeModel, ForwardModel};
use crate::inference::{
    linear_gaussian_posterior, mwg_run, CorrelationStructure, GaussianPosterior, JointPriorFamily, MwgConfig, MwgInit,
    MwgProblem, NoiseModel, PriorFamily,
};
use crate::joint_prior::{split, Contraction, JointPrior};
use crate::mesh_fem::{Mesh, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CokrigeConfig {
    pub mesh: MeshConfig,
    pub priors: FieldPriorConfig,
    pub true_correlation: f64,
    pub obs_p: GridLayout,
    pub obs_m: GridLayout,
    /// Noise standard deviation as a percentage of the clean data range, per field.
    pub noise_percent: [f64; 2],
    pub fixed_correlations: Vec<f64>,
    pub seed: u64,
    /// Number of `p` nodes whose traces feed the ESS summary.
    pub ess_nodes: usize,
    /// `mcmc.seed` and `mcmc.track` are overwritten.
    pub mcmc: MwgConfig,
}

impl Default for CokrigeConfig {
    fn default() -> Self {
        Self::full_scale().scaled(0.52)
    }
}

impl CokrigeConfig {
    /// 50 × 25 mesh, 60 observations of `p` and 32 of `m`.
    pub fn full_scale() -> Self {
        Self {
            mesh: MeshConfig::new(50, 25, 2.0, 1.0),
            priors: FieldPriorConfig::default(),
            true_correlation: -0.9,
            obs_p: GridLayout {
                x: [1.0, 2.0],
                y: [0.0, 1.0],
                nx: 10,
                ny: 6,
            },
            obs_m: GridLayout {
                x: [0.0, 2.0],
                y: [0.5, 1.0],
                nx: 8,
                ny: 4,
            },
            noise_percent: [1.0, 1.0],
            fixed_correlations: vec![-0.9, 0.0, 0.9],
            seed: 11,
            ess_nodes: 20,
            mcmc: MwgConfig {
                total_samples: 100_000,
                burn_in: 1_000,
                ..MwgConfig::default()
            },
        }
    }

    /// Scales the mesh and the observation grid counts per direction.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.mesh = self.mesh.scaled(factor);
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        for g in [&mut self.obs_p, &mut self.obs_m] {
            g.nx = s(g.nx);
            g.ny = s(g.ny);
        }
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.true_correlation.abs() < 1.0) || self.fixed_correlations.iter().any(|c| !(c.abs() < 1.0)) {
            return Err(Error::InvalidArgument("correlations must lie in (-1, 1)".into()));
        }
        if self.noise_percent.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidArgument("noise percentages must be positive".into()));
        }
        self.mcmc.validate()
    }
}

/// Mesh, priors, truth and data; shared by every posterior in the experiment.
pub struct CokrigeSetup {
    pub mesh: Mesh,
    pub priors: FieldPriors,
    pub model: CokrigeModel,
    pub truth_p: DVector<f64>,
    pub truth_m: DVector<f64>,
    pub data: DVector<f64>,
    pub noise: NoiseModel,
    pub prior_var_p: DVector<f64>,
    pub prior_var_m: DVector<f64>,
}

impl CokrigeSetup {
    pub fn new(cfg: &CokrigeConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = cfg.mesh.build()?;
        let n = mesh.num_nodes();
        let priors = cfg.priors.build(&mesh)?;
        let model = CokrigeModel::new(cfg.obs_p.observe(&mesh)?, cfg.obs_m.observe(&mesh)?);

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let truth_prior = JointPrior::centred(
            priors.filter_p.clone(),
            priors.filter_m.clone(),
            Contraction::scalar(cfg.true_correlation, n, n)?,
        )?;
        let (truth_p, truth_m) = split(&truth_prior.sample(&mut rng), n);
        let clean_p = model.obs_p().apply(&truth_p);
        let clean_m = model.obs_m().apply(&truth_m);
        let noise = NoiseModel::new(vec![
            (clean_p.len(), range_noise_std(&clean_p, cfg.noise_percent[0])?),
            (clean_m.len(), range_noise_std(&clean_m, cfg.noise_percent[1])?),
        ])?;
        let clean = model.evaluate(&crate::joint_prior::stack(&truth_p, &truth_m))?;
        let data = clean + noise.sample(&mut rng);
        let prior_var_p = priors.filter_p.covariance_dense().diagonal();
        let prior_var_m = priors.filter_m.covariance_dense().diagonal();
        Ok(Self {
            mesh,
            priors,
            model,
            truth_p,
            truth_m,
            data,
            noise,
            prior_var_p,
            prior_var_m,
        })
    }

    pub fn n1(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn family(&self, structure: CorrelationStructure) -> Result<JointPriorFamily> {
        let n = self.n1();
        JointPriorFamily::new(
            self.priors.filter_p.clone(),
            self.priors.filter_m.clone(),
            DVector::zeros(n),
            DVector::zeros(n),
            structure,
        )
    }

    /// Exact posterior with the correlation fixed at `c`.
    pub fn fixed_posterior(&self, c: f64) -> Result<GaussianPosterior> {
        let n = self.n1();
        let family = self.family(CorrelationStructure::Fixed(Contraction::scalar(c, n, n)?))?;
        let g = self.model.linear_matrix().expect("co-kriging is linear");
        linear_gaussian_posterior(&g, &self.noise, &self.data, &family.mean(), &family.covariance(&[])?)
    }

    pub fn metrics(&self, post: &FieldPosterior) -> Result<FieldMetrics> {
        field_metrics(&self.truth_p, &self.truth_m, &post.p, &post.m, &self.prior_var_p, &self.prior_var_m)
    }
}

#[derive(Debug, Clone)]
pub struct FixedCorrelationRun {
    pub correlation: f64,
    pub posterior: FieldPosterior,
    pub metrics: FieldMetrics,
}

#[derive(Debug, Clone)]
pub struct CokrigeJoint {
    pub posterior: FieldPosterior,
    pub c: Vec<f64>,
    /// 50 uniform bins on `(-1, 1)`.
    pub c_histogram: Vec<usize>,
    pub negative_mass: f64,
    pub c_median: f64,
    pub d_p: DVector<f64>,
    pub d_m: DVector<f64>,
    pub report: MetricsReport,
    /// `(iteration, τ)`; empty for exact conditional updates.
    pub tau_trace: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct CokrigeResult {
    pub nodes: Vec<Point>,
    pub truth_p: DVector<f64>,
    pub truth_m: DVector<f64>,
    pub data: DVector<f64>,
    /// Uncorrelated priors, `c = 0`.
    pub independent: FixedCorrelationRun,
    pub fixed: Vec<FixedCorrelationRun>,
    pub joint: Option<CokrigeJoint>,
}

fn fixed_run(setup: &CokrigeSetup, c: f64) -> Result<FixedCorrelationRun> {
    let post = setup.fixed_posterior(c)?;
    let posterior = FieldPosterior::from_gaussian(&post.mean, &post.covariance, setup.n1());
    Ok(FixedCorrelationRun {
        correlation: c,
        metrics: setup.metrics(&posterior)?,
        posterior,
    })
}

pub fn run(cfg: &CokrigeConfig, with_mcmc: bool) -> Result<CokrigeResult> {
    let setup = CokrigeSetup::new(cfg)?;
    let n = setup.n1();
    let independent = fixed_run(&setup, 0.0)?;
    let fixed = cfg
        .fixed_correlations
        .iter()
        .map(|&c| fixed_run(&setup, c))
        .collect::<Result<Vec<_>>>()?;

    let joint = if with_mcmc {
        let family = setup.family(CorrelationStructure::Free(Contraction::scalar(0.0, n, n)?))?;
        let problem = MwgProblem {
            model: &setup.model,
            family: &family,
            noise: &setup.noise,
            data: &setup.data,
            moment_map: None,
        };
        let mut mcfg = cfg.mcmc.clone();
        mcfg.seed = stream_seed(cfg.seed, 1);
        mcfg.track = spread_indices(n, cfg.ess_nodes);
        let chain = mwg_run(&problem, &mcfg, MwgInit::default())?;
        let posterior = FieldPosterior::from_joint(chain.moments.mean(), &chain.moments.variance(), n);
        let metrics = setup.metrics(&posterior)?;
        let d_p = std_difference(&independent.posterior.p.variance, &posterior.p.variance)?;
        let d_m = std_difference(&independent.posterior.m.variance, &posterior.m.variance)?;
        let c = chain.correlation_trace(0);
        let node_ess: Vec<f64> = chain.tracked.iter().filter_map(|t| ess(t).ok()).collect();
        let report = MetricsReport {
            independent: independent.metrics,
            joint: metrics,
            d_p_max: d_p.amax(),
            d_m_max: d_m.amax(),
            ess: vec![
                ("c".into(), ess(&c).unwrap_or(f64::NAN)),
                (
                    format!("p (median over {} nodes)", node_ess.len()),
                    median(&node_ess).unwrap_or(f64::NAN),
                ),
            ],
            acceptance: vec![("s".into(), chain.s_acceptance()), ("c".into(), chain.gamma_acceptance())],
        };
        Some(CokrigeJoint {
            c_histogram: histogram(&c, -1.0, 1.0, 50),
            negative_mass: mass_where(&c, |v| v < 0.0),
            c_median: median(&c).unwrap_or(f64::NAN),
            posterior,
            c,
            d_p,
            d_m,
            report,
            tau_trace: chain.tau_trace.clone(),
        })
    } else {
        None
    };

    Ok(CokrigeResult {
        nodes: setup.mesh.nodes().to_vec(),
        truth_p: setup.truth_p,
        truth_m: setup.truth_m,
        data: setup.data,
        independent,
        fixed,
        joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CokrigeConfig {
        let mut cfg = CokrigeConfig::full_scale().scaled(0.3);
        cfg.mcmc.total_samples = 3_000;
        cfg.mcmc.burn_in = 500;
        cfg
    }

    #[test]
    fn default_is_scaled_full_layout() {
        let cfg = CokrigeConfig::default();
        assert_eq!((cfg.mesh.nx, cfg.mesh.ny), (26, 13));
        assert_eq!(cfg.obs_p.len(), 15);
        assert_eq!(cfg.obs_m.len(), 8);
        let full = CokrigeConfig::full_scale();
        assert_eq!((full.obs_p.len(), full.obs_m.len()), (60, 32));
    }

    #[test]
    fn fixed_zero_matches_independent_kriging() {
        let setup = CokrigeSetup::new(&small()).unwrap();
        let n = setup.n1();
        let joint = setup.fixed_posterior(0.0).unwrap();
        // Oracle: separate kriging of each field from its own data.
        let gamma_p = setup.priors.filter_p.covariance_dense();
        let bp = setup.model.obs_p().to_dense();
        let q1 = bp.nrows();
        let sd = setup.noise.std_devs();
        let noise_p = NoiseModel::iid(q1, sd[0]).unwrap();
        let dp = setup.data.rows(0, q1).into_owned();
        let post_p = linear_gaussian_posterior(&bp, &noise_p, &dp, &DVector::zeros(n), &gamma_p).unwrap();
        assert!((joint.mean.rows(0, n) - &post_p.mean).amax() < 1e-10);
        assert!((joint.covariance.view((0, 0), (n, n)) - &post_p.covariance).amax() < 1e-10);
        assert!(joint.covariance.view((0, n), (n, n)).amax() < 1e-10);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let cfg = small();
        let a = run(&cfg, true).unwrap();
        let b = run(&cfg, true).unwrap();
        assert_eq!(a.truth_p, b.truth_p);
        assert_eq!(a.joint.as_ref().unwrap().c, b.joint.as_ref().unwrap().c);
        let j = a.joint.unwrap();
        assert_eq!(j.c.len(), 2_500);
        assert_eq!(j.c_histogram.iter().sum::<usize>(), 2_500);
        assert_eq!(a.fixed.len(), 3);
    }
}
