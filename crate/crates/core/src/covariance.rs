//! Marginal covariance models, whitening filters and truncated KL bases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky, CholeskyFactor, SpdMatrix};
use crate::mesh_fem::{assemble_fem_matrices, Mesh, Point, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub correlation_length: f64,
    #[serde(default = "default_nugget")]
    pub nugget: f64,
}

fn default_nugget() -> f64 {
    1e-8
}

impl KernelConfig {
    pub fn new(correlation_length: f64) -> Self {
        Self {
            correlation_length,
            nugget: default_nugget(),
        }
    }
}

/// Squared-exponential covariance `exp(-½ (r/ℓ)²) + nugget·δ`.
pub fn sqexp_covariance(points: &[Point], cfg: &KernelConfig) -> Result<SpdMatrix> {
    let ell = cfg.correlation_length;
    if !(ell > 0.0) {
        return Err(Error::InvalidArgument(format!("correlation length must be positive (got {ell})")));
    }
    if cfg.nugget < 0.0 {
        return Err(Error::InvalidArgument(format!("nugget must be nonnegative (got {})", cfg.nugget)));
    }
    let n = points.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = 1.0 + cfg.nugget;
        for j in 0..i {
            let r2 = (points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2);
            if r2 == 0.0 && cfg.nugget == 0.0 {
                return Err(Error::DuplicatePoints { first: j, second: i });
            }
            let v = (-0.5 * r2 / (ell * ell)).exp();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    SpdMatrix::new(g)
}

/// Points `x_i = i/(n-1) * length` on a line, embedded at `y = 0`.
pub fn line_points(n: usize, length: f64) -> Vec<Point> {
    let h = if n > 1 { length / (n - 1) as f64 } else { 0.0 };
    (0..n).map(|i| [i as f64 * h, 0.0]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdePriorConfig {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    #[serde(default = "identity_tensor")]
    pub theta: Tensor2,
}

fn identity_tensor() -> Tensor2 {
    crate::mesh_fem::IDENTITY_TENSOR
}

impl PdePriorConfig {
    pub fn isotropic(a1: f64, a2: f64, a3: f64) -> Self {
        Self {
            a1,
            a2,
            a3,
            theta: identity_tensor(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.a1 > 0.0 && self.a2 > 0.0) || !(self.a3 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pde prior needs a1, a2 > 0 and a3 >= 0 (got {}, {}, {})",
                self.a1, self.a2, self.a3
            )));
        }
        let t = self.theta;
        let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
        if (t[0][1] - t[1][0]).abs() > 1e-12 * t[0][0].abs().max(t[1][1].abs()) || !(t[0][0] > 0.0) || !(det > 0.0) {
            return Err(Error::InvalidArgument("anisotropy tensor must be symmetric positive definite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Cholesky,
    PrincipalSqrt,
    PrecisionSqrt,
}

#[derive(Debug, Clone)]
enum Repr {
    /// `Γ = R Rᵀ`, `L = R⁻¹`.
    Cholesky(CholeskyFactor),
    /// `S = Γ^{1/2}`, `L = S⁻¹`.
    Sqrt { sqrt: DMatrix<f64>, inv_sqrt: DMatrix<f64> },
    /// Symmetric `L` given directly, `Γ = L⁻²`.
    Precision { op: DMatrix<f64>, factor: CholeskyFactor },
}

/// A factor `L` with `Γ = (LᵀL)⁻¹`.
#[derive(Debug, Clone)]
pub struct WhiteningFilter {
    kind: FilterKind,
    repr: Repr,
    covariance: Option<DMatrix<f64>>,
}

impl WhiteningFilter {
    /// Filter for an explicitly given covariance. `PrecisionSqrt` is not
    /// available here; use [`fem_precision_filter`] or [`WhiteningFilter::from_precision_sqrt`].
    pub fn new(gamma: &SpdMatrix, kind: FilterKind) -> Result<Self> {
        let repr = match kind {
            FilterKind::Cholesky => Repr::Cholesky(gamma.factor().clone()),
            FilterKind::PrincipalSqrt => {
                let sqrt = linalg::principal_sqrt(gamma)?.into_matrix();
                let inv_sqrt = linalg::inverse_principal_sqrt(gamma)?.into_matrix();
                Repr::Sqrt { sqrt, inv_sqrt }
            }
            FilterKind::PrecisionSqrt => {
                return Err(Error::InvalidArgument(
                    "precision-sqrt filters are built from a precision operator".into(),
                ))
            }
        };
        Ok(Self {
            kind,
            repr,
            covariance: Some(gamma.matrix().clone()),
        })
    }

    /// Filter from a symmetric positive definite operator `L`, so that `Γ = L⁻²`.
    pub fn from_precision_sqrt(op: DMatrix<f64>) -> Result<Self> {
        let spd = SpdMatrix::new(op)?;
        let factor = spd.factor().clone();
        Ok(Self {
            kind: FilterKind::PrecisionSqrt,
            repr: Repr::Precision {
                op: spd.into_matrix(),
                factor,
            },
            covariance: None,
        })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Cholesky(f) => f.dim(),
            Repr::Sqrt { sqrt, .. } => sqrt.nrows(),
            Repr::Precision { op, .. } => op.nrows(),
        }
    }

    /// `L x`
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Cholesky(f) => f.solve_lower(x),
            Repr::Sqrt { inv_sqrt, .. } => inv_sqrt * x,
            Repr::Precision { op, .. } => op * x,
        }
    }

    /// `Lᵀ x`
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Cholesky(f) => f.solve_upper(x),
            _ => self.apply(x),
        }
    }

    /// `L⁻¹ x`
    pub fn apply_inverse(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Cholesky(f) => f.mul_lower(x),
            Repr::Sqrt { sqrt, .. } => sqrt * x,
            Repr::Precision { factor, .. } => factor.solve(x),
        }
    }

    /// `L⁻ᵀ x`
    pub fn apply_inverse_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.repr {
            Repr::Cholesky(f) => f.mul_upper(x),
            _ => self.apply_inverse(x),
        }
    }

    /// Dense `L`.
    pub fn forward_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Cholesky(f) => f.solve_lower_matrix(&DMatrix::identity(f.dim(), f.dim())),
            Repr::Sqrt { inv_sqrt, .. } => inv_sqrt.clone(),
            Repr::Precision { op, .. } => op.clone(),
        }
    }

    /// Dense `L⁻¹`.
    pub fn inverse_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Cholesky(f) => f.lower().clone(),
            Repr::Sqrt { sqrt, .. } => sqrt.clone(),
            Repr::Precision { factor, .. } => factor.inverse(),
        }
    }

    /// Dense `Γ`; the stored input covariance when the filter was built from one.
    pub fn covariance_dense(&self) -> DMatrix<f64> {
        if let Some(g) = &self.covariance {
            return g.clone();
        }
        let li = self.inverse_dense();
        linalg::symmetrize(&(&li * li.transpose()))
    }

    /// `ln |Γ|`
    pub fn logdet_covariance(&self) -> Result<f64> {
        Ok(match &self.repr {
            Repr::Cholesky(f) => f.logdet(),
            Repr::Sqrt { sqrt, .. } => 2.0 * cholesky(sqrt)?.logdet(),
            Repr::Precision { factor, .. } => -2.0 * factor.logdet(),
        })
    }
}

/// Filter with `L = a1 K + a2 M + a3 B`, i.e. `Γ = (a1 K + a2 M + a3 B)⁻²`.
pub fn fem_precision_filter(mesh: &Mesh, cfg: &PdePriorConfig) -> Result<WhiteningFilter> {
    cfg.validate()?;
    let fem = assemble_fem_matrices(mesh, &cfg.theta, None)?;
    let op = fem.combine_dense(cfg.a1, cfg.a2, cfg.a3);
    WhiteningFilter::from_precision_sqrt(linalg::symmetrize(&op))
}

pub fn whitening_filter(gamma: &SpdMatrix, kind: FilterKind) -> Result<WhiteningFilter> {
    WhiteningFilter::new(gamma, kind)
}

/// Leading eigenpairs of a covariance.
#[derive(Debug, Clone)]
pub struct KLBasis {
    modes: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    captured_fraction: f64,
}

impl KLBasis {
    pub fn k(&self) -> usize {
        self.modes.ncols()
    }

    pub fn dim(&self) -> usize {
        self.modes.nrows()
    }

    /// Orthonormal modes as columns.
    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn scales(&self) -> DVector<f64> {
        self.eigenvalues.map(f64::sqrt)
    }

    pub fn captured_fraction(&self) -> f64 {
        self.captured_fraction
    }

    /// `Σ √λ_i c_i v_i`; add the field mean separately.
    pub fn reconstruct(&self, coords: &DVector<f64>) -> DVector<f64> {
        &self.modes * coords.component_mul(&self.scales())
    }

    /// Dense map from coordinates to fields, `V̂ Λ̂^{1/2}`.
    pub fn synthesis_matrix(&self) -> DMatrix<f64> {
        let s = self.scales();
        let mut out = self.modes.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= s[j];
        }
        out
    }

    /// Least-squares coordinates of a (mean-removed) field, `Λ̂^{-1/2} V̂ᵀ f`.
    pub fn coordinates(&self, field: &DVector<f64>) -> DVector<f64> {
        (self.modes.transpose() * field).component_div(&self.scales())
    }
}

pub fn kl_truncate(gamma: &SpdMatrix, k: usize) -> Result<KLBasis> {
    let n = gamma.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("KL truncation order {k} outside 1..={n}")));
    }
    let eig = linalg::sym_eig(gamma.matrix())?;
    kl_from_eig(&eig, k)
}

/// KL basis of `Γ = L⁻²` for a precision-square-root filter without forming `Γ`:
/// the eigenvectors of `L` are shared and `λ = μ⁻²`.
pub fn kl_truncate_filter(filter: &WhiteningFilter, k: usize) -> Result<KLBasis> {
    let n = filter.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("KL truncation order {k} outside 1..={n}")));
    }
    let eig = match &filter.repr {
        Repr::Precision { op, .. } => {
            let e = linalg::sym_eig(op)?;
            // Ascending in μ means descending in μ⁻².
            let values = DVector::from_iterator(n, e.values.iter().rev().map(|mu| mu.powi(-2)));
            let mut vectors = DMatrix::zeros(n, n);
            for j in 0..n {
                vectors.set_column(j, &e.vectors.column(n - 1 - j));
            }
            linalg::SymEig { values, vectors }
        }
        _ => linalg::sym_eig(&filter.covariance_dense())?,
    };
    kl_from_eig(&eig, k)
}

fn kl_from_eig(eig: &linalg::SymEig, k: usize) -> Result<KLBasis> {
    let total: f64 = eig.values.iter().sum();
    let kept = eig.values.rows(0, k).into_owned();
    if let Some(&bad) = kept.iter().find(|&&l| !(l > 0.0)) {
        return Err(Error::EigenvalueTooSmall { value: bad, floor: 0.0 });
    }
    Ok(KLBasis {
        modes: eig.vectors.columns(0, k).into_owned(),
        captured_fraction: kept.sum() / total,
        eigenvalues: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::build_lattice_mesh;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(n: usize, seed: u64) -> SpdMatrix {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        SpdMatrix::from_symmetrized(&a * a.transpose() + DMatrix::identity(n, n) * 0.3).unwrap()
    }

    fn round_trip_error(f: &WhiteningFilter, gamma: &DMatrix<f64>) -> f64 {
        let l = f.forward_dense();
        let n = gamma.nrows();
        (l.transpose() * l * gamma - DMatrix::identity(n, n)).norm() / (n as f64).sqrt()
    }

    #[test]
    fn sqexp_entries() {
        let cfg = KernelConfig { correlation_length: 0.3, nugget: 0.0 };
        let g = sqexp_covariance(&[[0.0, 0.0], [0.3, 0.0]], &cfg).unwrap();
        assert_eq!(g.matrix()[(0, 0)], 1.0);
        assert!((g.matrix()[(0, 1)] - 0.606531).abs() < 1e-6);
        let g = sqexp_covariance(&line_points(50, 1.0), &KernelConfig::new(0.1));
        assert!(g.is_ok());
        let dup = sqexp_covariance(&[[0.1, 0.2], [0.1, 0.2]], &cfg);
        assert!(matches!(dup, Err(Error::DuplicatePoints { first: 0, second: 1 })));
    }

    #[test]
    fn filters_of_simple_covariances() {
        for kind in [FilterKind::Cholesky, FilterKind::PrincipalSqrt] {
            let f = whitening_filter(&SpdMatrix::identity(3), kind).unwrap();
            assert!((f.forward_dense() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
            let f = whitening_filter(&SpdMatrix::from_diagonal(&[4.0]).unwrap(), kind).unwrap();
            assert!((f.forward_dense()[(0, 0)] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_round_trip_and_operations() {
        let gamma = random_spd(8, 2);
        for kind in [FilterKind::Cholesky, FilterKind::PrincipalSqrt] {
            let f = whitening_filter(&gamma, kind).unwrap();
            assert!(round_trip_error(&f, gamma.matrix()) < 1e-8);
            let x = DVector::from_fn(8, |i, _| (i as f64).sin());
            assert!((f.apply_inverse(&f.apply(&x)) - &x).amax() < 1e-10);
            assert!((f.apply_inverse_transpose(&f.apply_transpose(&x)) - &x).amax() < 1e-10);
            let ld = f.logdet_covariance().unwrap();
            assert!((ld - gamma.factor().logdet()).abs() < 1e-9);
        }
    }

    #[test]
    fn pde_filters_are_valid() {
        let mesh = build_lattice_mesh(20, 10, 2.0, 1.0).unwrap();
        let configs = [
            PdePriorConfig::isotropic(4e-2, 1.0, 0.125),
            PdePriorConfig {
                a1: 1.0,
                a2: 1.0,
                a3: 0.125,
                theta: [[1.0, 0.0], [0.0, 0.025]],
            },
            PdePriorConfig::isotropic(1.5, 30.0, 7.5),
        ];
        for cfg in configs {
            let f = fem_precision_filter(&mesh, &cfg).unwrap();
            assert_eq!(f.kind(), FilterKind::PrecisionSqrt);
            let gamma = f.covariance_dense();
            assert!(round_trip_error(&f, &gamma) < 1e-8);
            let x = DVector::from_fn(200, |i, _| (i as f64 * 0.1).cos());
            let twice = f.apply_inverse(&f.apply_inverse(&x));
            assert!((&gamma * &x - &twice).norm() / twice.norm() < 1e-8);
        }
        assert!(fem_precision_filter(&mesh, &PdePriorConfig::isotropic(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn kl_captured_fraction() {
        let g = SpdMatrix::from_diagonal(&[4.0, 1.0, 0.01]).unwrap();
        let b = kl_truncate(&g, 1).unwrap();
        assert!((b.captured_fraction() - 4.0 / 5.01).abs() < 1e-12);
        assert_eq!(kl_truncate(&g, 3).unwrap().captured_fraction(), 1.0);
        assert!(kl_truncate(&g, 0).is_err() && kl_truncate(&g, 4).is_err());
        let g = random_spd(12, 9);
        let mut last = 0.0;
        for k in 1..=12 {
            let b = kl_truncate(&g, k).unwrap();
            assert!(b.captured_fraction() >= last);
            last = b.captured_fraction();
            let vtv = b.modes().transpose() * b.modes();
            assert!((vtv - DMatrix::identity(k, k)).amax() < 1e-10);
        }
    }

    #[test]
    fn kl_of_precision_filter_matches_dense() {
        let mesh = build_lattice_mesh(8, 5, 2.0, 1.0).unwrap();
        let f = fem_precision_filter(&mesh, &PdePriorConfig::isotropic(1.5, 30.0, 7.5)).unwrap();
        let dense = SpdMatrix::from_symmetrized(f.covariance_dense()).unwrap();
        let a = kl_truncate(&dense, 6).unwrap();
        let b = kl_truncate_filter(&f, 6).unwrap();
        let rel = (a.eigenvalues() - b.eigenvalues()).amax() / a.eigenvalues()[0];
        assert!(rel < 1e-8);
        assert!((a.captured_fraction() - b.captured_fraction()).abs() < 1e-8);
    }

    #[test]
    fn filter_samples_reproduce_covariance() {
        let points = line_points(10, 1.0);
        let gamma = sqexp_covariance(&points, &KernelConfig::new(0.2)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for kind in [FilterKind::Cholesky, FilterKind::PrincipalSqrt] {
            let f = whitening_filter(&gamma, kind).unwrap();
            let n_samples = 200_000;
            let mut acc = DMatrix::zeros(10, 10);
            for _ in 0..n_samples {
                let eta = DVector::from_fn(10, |_, _| StandardNormal.sample(&mut rng));
                let x = f.apply_inverse(&eta);
                acc.ger(1.0, &x, &x, 1.0);
            }
            acc /= n_samples as f64;
            assert!((acc - gamma.matrix()).amax() < 0.02);
        }
    }
}
