#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks
#![allow(clippy::needless_range_loop)]

//! Jointly normal priors with prescribed Gaussian marginals and an uncertain
//! cross-correlation, plus the samplers and experiments built on them.

pub mod covariance;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod forward_models;
pub mod inference;
pub mod joint_prior;
pub mod linalg;
pub mod mesh_fem;
pub mod verify;

pub use covariance::{FilterKind, WhiteningFilter};
pub use error::{Error, ErrorCategory, Result};
pub use joint_prior::{Contraction, JointPrior};
pub use mesh_fem::{Mesh, Point};
/// Re-exported so callers can build inputs without a direct dependency.
pub use nalgebra;
