//! Likelihoods, conjugate posteriors, the Metropolis-within-Gibbs sampler and
//! the Gauss-Newton warm start.

pub mod family;
pub mod likelihood;
pub mod map;
pub mod metropolis;
pub mod mwg;

pub use family::{
    ChainRng, CorrelationStructure, CorrelationTarget, GibbsKernel, JointPriorFamily, PriorFamily, ReducedPriorFamily,
    StateTarget,
};
pub use likelihood::{gaussian_loglik, linear_gaussian_posterior, GaussianPosterior, NoiseModel};
pub use map::{gauss_newton_map, GaussNewtonConfig, MapEstimate};
pub use metropolis::{AdaptationConfig, AdaptiveMetropolis};
pub use mwg::{log_posterior, mwg_run, Chain, MomentMap, MwgConfig, MwgInit, MwgProblem, RunningMoments};
