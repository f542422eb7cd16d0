//! Joint prior draws on a rectangle (homogeneous and split-sign correlation)
//! and between a 2D field and a field on its bottom edge.

use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::MeshConfig;
use crate::covariance::{fem_precision_filter, sqexp_covariance, whitening_filter, FilterKind, KernelConfig, PdePriorConfig};
use crate::error::Result;
use crate::joint_prior::{split, Contraction, JointPrior};
use crate::mesh_fem::Point;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectangleSampling {
    pub mesh: MeshConfig,
    pub p_prior: PdePriorConfig,
    pub m_kernel: KernelConfig,
    pub m_filter: FilterKind,
    pub correlation: f64,
    /// Correlation flips sign for `x > split_x` in the second case.
    pub split_x: f64,
}

impl Default for RectangleSampling {
    fn default() -> Self {
        Self {
            mesh: MeshConfig::new(40, 20, 2.0, 1.0),
            p_prior: PdePriorConfig::isotropic(4e-2, 1.0, 0.125),
            m_kernel: KernelConfig::new(0.2),
            m_filter: FilterKind::PrincipalSqrt,
            correlation: 0.999,
            split_x: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySampling {
    pub mesh: MeshConfig,
    pub p_prior: PdePriorConfig,
    pub m_kernel: KernelConfig,
    pub m_filter: FilterKind,
    pub correlation: f64,
}

impl Default for BoundarySampling {
    fn default() -> Self {
        Self {
            mesh: MeshConfig::new(40, 20, 2.0, 1.0),
            p_prior: PdePriorConfig {
                a1: 1.0,
                a2: 1.0,
                a3: 0.125,
                theta: [[1.0, 0.0], [0.0, 0.025]],
            },
            m_kernel: KernelConfig::new(0.1),
            m_filter: FilterKind::PrincipalSqrt,
            correlation: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplePriorConfig {
    pub seed: u64,
    pub samples: usize,
    pub rectangle: RectangleSampling,
    pub boundary: BoundarySampling,
}

impl Default for SamplePriorConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            samples: 3,
            rectangle: RectangleSampling::default(),
            boundary: BoundarySampling::default(),
        }
    }
}

impl SamplePriorConfig {
    pub fn scaled(mut self, factor: f64) -> Self {
        self.rectangle.mesh = self.rectangle.mesh.scaled(factor);
        self.boundary.mesh = self.boundary.mesh.scaled(factor);
        self
    }
}

/// Draws from one joint prior, plus the realised pointwise correlation
/// `Γ_pm[i,j] / √(Γ_p[i,i] Γ_m[j,j])` over the coupled pairs `(i, j)`.
#[derive(Debug, Clone)]
pub struct SampleCase {
    pub name: String,
    pub p_nodes: Vec<Point>,
    pub m_nodes: Vec<Point>,
    pub p_samples: Vec<DVector<f64>>,
    pub m_samples: Vec<DVector<f64>>,
    pub pairs: Vec<(usize, usize)>,
    pub target_correlation: Vec<f64>,
    pub realised_correlation: Vec<f64>,
}

fn realised(prior: &JointPrior, pairs: &[(usize, usize)]) -> Vec<f64> {
    let cross = prior.cross_covariance_dense();
    let vp = prior.filter_p().covariance_dense().diagonal();
    let vm = prior.filter_m().covariance_dense().diagonal();
    pairs.iter().map(|&(i, j)| cross[(i, j)] / (vp[i] * vm[j]).sqrt()).collect()
}

type Draws = (Vec<DVector<f64>>, Vec<DVector<f64>>);

fn draw(prior: &JointPrior, etas: &[DVector<f64>]) -> Result<Draws> {
    let mut ps = Vec::with_capacity(etas.len());
    let mut ms = Vec::with_capacity(etas.len());
    for eta in etas {
        let (p, m) = split(&prior.sample_from(eta)?, prior.n1());
        ps.push(p);
        ms.push(m);
    }
    Ok((ps, ms))
}

/// Three cases: homogeneous correlation, split-sign correlation (same noise
/// draws, hence the same `p` samples) and field-to-bottom-edge coupling.
pub fn run(cfg: &SamplePriorConfig) -> Result<Vec<SampleCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();

    let r = &cfg.rectangle;
    let mesh = r.mesh.build()?;
    let n = mesh.num_nodes();
    let fp = Arc::new(fem_precision_filter(&mesh, &r.p_prior)?);
    let fm = Arc::new(whitening_filter(&sqexp_covariance(mesh.nodes(), &r.m_kernel)?, r.m_filter)?);
    let etas: Vec<DVector<f64>> = (0..cfg.samples)
        .map(|_| DVector::from_fn(2 * n, |_, _| rng.sample(StandardNormal)))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let split_labels: Vec<usize> = mesh.nodes().iter().map(|x| usize::from(x[0] > r.split_x)).collect();
    let split_target = split_labels.iter().map(|&l| if l == 0 { r.correlation } else { -r.correlation }).collect();
    let cases = [
        ("homogeneous", Contraction::scalar(r.correlation, n, n)?, vec![r.correlation; n]),
        ("split_sign", Contraction::piecewise(split_labels, vec![r.correlation, -r.correlation])?, split_target),
    ];
    for (name, c, target) in cases {
        let prior = JointPrior::centred(fp.clone(), fm.clone(), c)?;
        let (p_samples, m_samples) = draw(&prior, &etas)?;
        out.push(SampleCase {
            name: name.into(),
            p_nodes: mesh.nodes().to_vec(),
            m_nodes: mesh.nodes().to_vec(),
            p_samples,
            m_samples,
            realised_correlation: realised(&prior, &pairs),
            pairs: pairs.clone(),
            target_correlation: target,
        });
    }

    let b = &cfg.boundary;
    let mesh = b.mesh.build()?;
    let n = mesh.num_nodes();
    let bottom = mesh.bottom_nodes();
    let m_nodes: Vec<Point> = bottom.iter().map(|&i| mesh.nodes()[i]).collect();
    let fp = Arc::new(fem_precision_filter(&mesh, &b.p_prior)?);
    let fm = Arc::new(whitening_filter(&sqexp_covariance(&m_nodes, &b.m_kernel)?, b.m_filter)?);
    let k = bottom.len();
    let c = Contraction::paired_sparse(n, k, bottom.clone(), (0..k).collect(), vec![b.correlation; k])?;
    let prior = JointPrior::centred(fp, fm, c)?;
    let etas: Vec<DVector<f64>> = (0..cfg.samples)
        .map(|_| DVector::from_fn(n + k, |_, _| rng.sample(StandardNormal)))
        .collect();
    let (p_samples, m_samples) = draw(&prior, &etas)?;
    let pairs: Vec<(usize, usize)> = bottom.iter().enumerate().map(|(j, &i)| (i, j)).collect();
    out.push(SampleCase {
        name: "boundary".into(),
        p_nodes: mesh.nodes().to_vec(),
        m_nodes,
        p_samples,
        m_samples,
        realised_correlation: realised(&prior, &pairs),
        target_correlation: vec![b.correlation; k],
        pairs,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SamplePriorConfig {
        let mut cfg = SamplePriorConfig::default();
        cfg.rectangle.mesh = MeshConfig::new(12, 6, 2.0, 1.0);
        cfg.boundary.mesh = MeshConfig::new(12, 6, 2.0, 1.0);
        cfg
    }

    #[test]
    fn correlation_signs_follow_the_contraction() {
        let cases = run(&small()).unwrap();
        assert_eq!(cases.len(), 3);
        let homog = &cases[0];
        assert!(homog.realised_correlation.iter().all(|&r| r > 0.0 && r < 1.0));
        let split = &cases[1];
        assert_eq!(homog.p_samples, split.p_samples);
        // Away from the split the sign matches the target.
        for ((&(i, _), &t), &r) in split.pairs.iter().zip(&split.target_correlation).zip(&split.realised_correlation) {
            if (split.p_nodes[i][0] - 1.0).abs() > 0.4 {
                assert_eq!(t.signum(), r.signum(), "node {i}");
            }
        }
        let bnd = &cases[2];
        assert_eq!(bnd.m_samples[0].len(), 12);
        assert!(bnd.realised_correlation.iter().all(|&r| r > 0.0));
    }

    #[test]
    fn reproducible() {
        let a = run(&small()).unwrap();
        let b = run(&small()).unwrap();
        assert_eq!(a[2].m_samples, b[2].m_samples);
    }
}
