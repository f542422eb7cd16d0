//! Drivers for the sampling studies and the three inference experiments.
//! Each returns in-memory results; writing files is left to the caller.

pub mod cokrige;
pub mod darcy;
pub mod factor_compare;
pub mod monod;
pub mod sampling;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{fem_precision_filter, sqexp_covariance, whitening_filter, FilterKind, KernelConfig, PdePriorConfig, WhiteningFilter};
use crate::diagnostics::FieldSummary;
use crate::error::{Error, Result};
use crate::linalg::SpdMatrix;
use crate::mesh_fem::{build_lattice_mesh, point_observation_operator, Mesh, Point, PointObservation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl MeshConfig {
    pub const fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Self {
        Self { nx, ny, lx, ly }
    }

    pub fn build(&self) -> Result<Mesh> {
        build_lattice_mesh(self.nx, self.ny, self.lx, self.ly)
    }

    /// Multiplies the node counts per direction by `factor` (at least 2 each).
    pub fn scaled(&self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(2);
        Self {
            nx: s(self.nx),
            ny: s(self.ny),
            ..*self
        }
    }
}

/// Marginal priors shared by the two field experiments: squared-exponential
/// `p` and PDE-precision `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldPriorConfig {
    pub p_kernel: KernelConfig,
    pub p_filter: FilterKind,
    pub m_prior: PdePriorConfig,
}

impl Default for FieldPriorConfig {
    fn default() -> Self {
        Self {
            p_kernel: KernelConfig::new(0.3),
            p_filter: FilterKind::PrincipalSqrt,
            m_prior: PdePriorConfig::isotropic(1.5, 30.0, 7.5),
        }
    }
}

pub struct FieldPriors {
    pub gamma_p: SpdMatrix,
    pub filter_p: Arc<WhiteningFilter>,
    pub filter_m: Arc<WhiteningFilter>,
}

impl FieldPriorConfig {
    pub fn build(&self, mesh: &Mesh) -> Result<FieldPriors> {
        let gamma_p = sqexp_covariance(mesh.nodes(), &self.p_kernel)?;
        let filter_p = Arc::new(whitening_filter(&gamma_p, self.p_filter)?);
        let filter_m = Arc::new(fem_precision_filter(mesh, &self.m_prior)?);
        Ok(FieldPriors {
            gamma_p,
            filter_p,
            filter_m,
        })
    }
}

/// Regular `nx × ny` grid of cell centres over a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridLayout {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl GridLayout {
    pub fn points(&self) -> Vec<Point> {
        let (wx, wy) = ((self.x[1] - self.x[0]) / self.nx as f64, (self.y[1] - self.y[0]) / self.ny as f64);
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push([self.x[0] + (i as f64 + 0.5) * wx, self.y[0] + (j as f64 + 0.5) * wy]);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snaps to mesh nodes; two locations landing on one node is an error.
    pub fn observe(&self, mesh: &Mesh) -> Result<PointObservation> {
        let obs = point_observation_operator(mesh, &self.points())?;
        let mut seen = std::collections::HashMap::new();
        for (k, &i) in obs.indices().iter().enumerate() {
            if let Some(first) = seen.insert(i, k) {
                return Err(Error::DuplicatePoints { first, second: k });
            }
        }
        Ok(obs)
    }
}

/// Noise standard deviation `percent/100 · (max − min)` of clean observations.
pub fn range_noise_std(clean: &DVector<f64>, percent: f64) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::InvalidArgument("no observations to scale noise by".into()));
    }
    let sd = percent / 100.0 * (clean.max() - clean.min());
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise level {percent}% of a constant signal is zero"
        )));
    }
    Ok(sd)
}

/// Mean and pointwise variance of the `p` and `m` blocks.
#[derive(Debug, Clone)]
pub struct FieldPosterior {
    pub p: FieldSummary,
    pub m: FieldSummary,
}

impl FieldPosterior {
    pub fn from_joint(mean: &DVector<f64>, variance: &DVector<f64>, n1: usize) -> Self {
        let n2 = mean.len() - n1;
        Self {
            p: FieldSummary {
                mean: mean.rows(0, n1).into_owned(),
                variance: variance.rows(0, n1).into_owned(),
            },
            m: FieldSummary {
                mean: mean.rows(n1, n2).into_owned(),
                variance: variance.rows(n1, n2).into_owned(),
            },
        }
    }

    pub fn from_gaussian(mean: &DVector<f64>, covariance: &DMatrix<f64>, n1: usize) -> Self {
        Self::from_joint(mean, &covariance.diagonal(), n1)
    }
}

/// Independent stream seed derived from the master seed.
pub(crate) fn stream_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evenly spaced subset of `0..n` of size at most `k`.
pub(crate) fn spread_indices(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k + n / (2 * k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_points_are_cell_centres() {
        let g = GridLayout {
            x: [1.0, 2.0],
            y: [0.0, 1.0],
            nx: 2,
            ny: 2,
        };
        assert_eq!(g.points(), vec![[1.25, 0.25], [1.75, 0.25], [1.25, 0.75], [1.75, 0.75]]);
        let mesh = MeshConfig::new(26, 13, 2.0, 1.0).build().unwrap();
        assert_eq!(g.observe(&mesh).unwrap().len(), 4);
        let crowded = GridLayout { nx: 40, ..g };
        assert!(matches!(crowded.observe(&mesh), Err(Error::DuplicatePoints { .. })));
    }

    #[test]
    fn mesh_scaling() {
        let m = MeshConfig::new(26, 13, 2.0, 1.0);
        assert_eq!(m.scaled(2.0), MeshConfig::new(52, 26, 2.0, 1.0));
        assert_eq!(m.scaled(0.01).nx, 2);
    }

    #[test]
    fn noise_from_range() {
        let d = DVector::from_vec(vec![1.0, 3.0, 2.0]);
        assert!((range_noise_std(&d, 5.0).unwrap() - 0.1).abs() < 1e-15);
        assert!(range_noise_std(&DVector::from_element(3, 1.0), 1.0).is_err());
    }

    #[test]
    fn streams_differ() {
        assert_ne!(stream_seed(1, 0), stream_seed(1, 1));
        assert_ne!(stream_seed(1, 0), stream_seed(2, 0));
        assert_eq!(stream_seed(5, 3), stream_seed(5, 3));
    }

    #[test]
    fn spread() {
        assert_eq!(spread_indices(3, 5), vec![0, 1, 2]);
        let s = spread_indices(100, 4);
        assert_eq!(s, vec![12, 37, 62, 87]);
    }
}
