//! Jointly normal priors with prescribed marginals and a contraction-encoded
//! cross-correlation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{KLBasis, WhiteningFilter};
use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor, SpdMatrix, CONTRACTION_MARGIN};

/// Cross-correlation operator `C` with `‖C‖₂ < 1`.
#[derive(Debug, Clone, PartialEq)]
pub enum Contraction {
    /// `c` on the main diagonal of an `n1 × n2` matrix.
    Scalar { c: f64, n1: usize, n2: usize },
    /// Square diagonal with `C_ii = values[labels[i]]`.
    Piecewise { labels: Vec<usize>, values: Vec<f64> },
    /// `C[rows[k], cols[k]] = values[k]`; rows distinct and columns distinct.
    PairedSparse {
        n1: usize,
        n2: usize,
        rows: Vec<usize>,
        cols: Vec<usize>,
        values: Vec<f64>,
    },
    Dense(DMatrix<f64>),
}

fn check_coefficient(v: f64) -> Result<()> {
    if !v.is_finite() || v.abs() >= 1.0 - CONTRACTION_MARGIN {
        return Err(Error::NotStrictContraction { sigma_max: v.abs() });
    }
    Ok(())
}

impl Contraction {
    pub fn scalar(c: f64, n1: usize, n2: usize) -> Result<Self> {
        check_coefficient(c)?;
        Ok(Contraction::Scalar { c, n1, n2 })
    }

    pub fn zero(n1: usize, n2: usize) -> Self {
        Contraction::Scalar { c: 0.0, n1, n2 }
    }

    pub fn piecewise(labels: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= values.len()) {
            return Err(Error::shape("piecewise contraction label", format!("< {}", values.len()), bad));
        }
        for &v in &values {
            check_coefficient(v)?;
        }
        Ok(Contraction::Piecewise { labels, values })
    }

    pub fn paired_sparse(n1: usize, n2: usize, rows: Vec<usize>, cols: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if rows.len() != cols.len() || rows.len() != values.len() {
            return Err(Error::shape(
                "paired contraction",
                format!("{} pairs", rows.len()),
                format!("{} columns, {} values", cols.len(), values.len()),
            ));
        }
        let mut seen_r = vec![false; n1];
        let mut seen_c = vec![false; n2];
        for (&r, &c) in rows.iter().zip(&cols) {
            if r >= n1 || c >= n2 {
                return Err(Error::shape("paired contraction index", format!("< ({n1}, {n2})"), format!("({r}, {c})")));
            }
            if std::mem::replace(&mut seen_r[r], true) || std::mem::replace(&mut seen_c[c], true) {
                return Err(Error::InvalidArgument(format!("pair ({r}, {c}) repeats a row or column")));
            }
        }
        for &v in &values {
            check_coefficient(v)?;
        }
        Ok(Contraction::PairedSparse {
            n1,
            n2,
            rows,
            cols,
            values,
        })
    }

    pub fn dense(c: DMatrix<f64>) -> Result<Self> {
        let sigma_max = linalg::spectral_norm(&c);
        if !sigma_max.is_finite() || sigma_max >= 1.0 - CONTRACTION_MARGIN {
            return Err(Error::NotStrictContraction { sigma_max });
        }
        Ok(Contraction::Dense(c))
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Contraction::Scalar { n1, n2, .. } => (*n1, *n2),
            Contraction::Piecewise { labels, .. } => (labels.len(), labels.len()),
            Contraction::PairedSparse { n1, n2, .. } => (*n1, *n2),
            Contraction::Dense(c) => c.shape(),
        }
    }

    /// Free scalar coefficients (empty for dense).
    pub fn coefficients(&self) -> Vec<f64> {
        match self {
            Contraction::Scalar { c, .. } => vec![*c],
            Contraction::Piecewise { values, .. } | Contraction::PairedSparse { values, .. } => values.clone(),
            Contraction::Dense(_) => Vec::new(),
        }
    }

    /// Same structure with new coefficients `tanh(γ)`.
    pub fn with_gamma(&self, gamma: &[f64]) -> Result<Self> {
        let coeffs: Vec<f64> = gamma.iter().map(|g| g.tanh()).collect();
        self.with_coefficients(&coeffs)
    }

    pub fn with_coefficients(&self, coeffs: &[f64]) -> Result<Self> {
        let expected = self.coefficients().len();
        if coeffs.len() != expected || matches!(self, Contraction::Dense(_)) {
            return Err(Error::shape("contraction coefficients", expected, coeffs.len()));
        }
        match self {
            Contraction::Scalar { n1, n2, .. } => Self::scalar(coeffs[0], *n1, *n2),
            Contraction::Piecewise { labels, .. } => Self::piecewise(labels.clone(), coeffs.to_vec()),
            Contraction::PairedSparse { n1, n2, rows, cols, .. } => {
                Self::paired_sparse(*n1, *n2, rows.clone(), cols.clone(), coeffs.to_vec())
            }
            Contraction::Dense(_) => unreachable!(),
        }
    }

    /// `∂C/∂c_l`: the same structure with coefficient `l` set to one and the
    /// rest to zero. Not itself a strict contraction.
    pub fn coefficient_basis(&self, l: usize) -> Option<DMatrix<f64>> {
        let mut coeffs = vec![0.0; self.coefficients().len()];
        *coeffs.get_mut(l)? = 1.0;
        let unit = match self {
            Contraction::Scalar { n1, n2, .. } => Contraction::Scalar { c: 1.0, n1: *n1, n2: *n2 },
            Contraction::Piecewise { labels, .. } => Contraction::Piecewise {
                labels: labels.clone(),
                values: coeffs,
            },
            Contraction::PairedSparse { n1, n2, rows, cols, .. } => Contraction::PairedSparse {
                n1: *n1,
                n2: *n2,
                rows: rows.clone(),
                cols: cols.clone(),
                values: coeffs,
            },
            Contraction::Dense(_) => return None,
        };
        Some(unit.to_dense())
    }

    /// Nonzero entries as `(row, col, value)` for the diagonal-like variants.
    fn entries(&self) -> Option<Vec<(usize, usize, f64)>> {
        match self {
            Contraction::Scalar { c, n1, n2 } => Some((0..*n1.min(n2)).map(|i| (i, i, *c)).collect()),
            Contraction::Piecewise { labels, values } => {
                Some(labels.iter().enumerate().map(|(i, &l)| (i, i, values[l])).collect())
            }
            Contraction::PairedSparse { rows, cols, values, .. } => Some(
                rows.iter()
                    .zip(cols)
                    .zip(values)
                    .map(|((&r, &c), &v)| (r, c, v))
                    .collect(),
            ),
            Contraction::Dense(_) => None,
        }
    }

    /// `C y`
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let (n1, _) = self.shape();
        match self.entries() {
            Some(e) => {
                let mut out = DVector::zeros(n1);
                for (r, c, v) in e {
                    out[r] = v * y[c];
                }
                out
            }
            None => match self {
                Contraction::Dense(c) => c * y,
                _ => unreachable!(),
            },
        }
    }

    /// `Cᵀ x`
    pub fn apply_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let (_, n2) = self.shape();
        match self.entries() {
            Some(e) => {
                let mut out = DVector::zeros(n2);
                for (r, c, v) in e {
                    out[c] = v * x[r];
                }
                out
            }
            None => match self {
                Contraction::Dense(c) => c.tr_mul(x),
                _ => unreachable!(),
            },
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Contraction::Dense(c) => c.clone(),
            _ => {
                let (n1, n2) = self.shape();
                let mut out = DMatrix::zeros(n1, n2);
                for (r, c, v) in self.entries().unwrap() {
                    out[(r, c)] = v;
                }
                out
            }
        }
    }

    pub fn sigma_max(&self) -> f64 {
        match self.entries() {
            Some(e) => e.iter().map(|t| t.2.abs()).fold(0.0, f64::max),
            None => linalg::spectral_norm(&self.to_dense()),
        }
    }

    /// `ln |I − C Cᵀ|`, by the product formula for diagonal-like variants and
    /// on the smaller Gram matrix otherwise.
    pub fn ln_det_defect(&self) -> Result<f64> {
        match self.entries() {
            Some(e) => Ok(e.iter().map(|t| (-t.2 * t.2).ln_1p()).sum()),
            None => {
                let c = self.to_dense();
                let (n1, n2) = c.shape();
                let gram = if n2 < n1 {
                    DMatrix::identity(n2, n2) - c.transpose() * &c
                } else {
                    DMatrix::identity(n1, n1) - &c * c.transpose()
                };
                Ok(linalg::logdet_spd(&SpdMatrix::from_symmetrized(gram)?))
            }
        }
    }

    /// Symmetric `D` with `D Dᵀ = I − CᵀC`.
    pub fn defect(&self) -> Result<Defect> {
        let (_, n2) = self.shape();
        match self.entries() {
            Some(e) => {
                let mut d = DVector::from_element(n2, 1.0);
                for (_, c, v) in e {
                    d[c] = (1.0 - v * v).sqrt();
                }
                Ok(Defect::Diagonal(d))
            }
            None => {
                let d = linalg::defect_factor(&self.to_dense())?;
                let factor = linalg::cholesky(&d)?;
                Ok(Defect::Dense { d, factor })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Defect {
    Diagonal(DVector<f64>),
    Dense { d: DMatrix<f64>, factor: CholeskyFactor },
}

impl Defect {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Defect::Diagonal(d) => d.component_mul(x),
            Defect::Dense { d, .. } => d * x,
        }
    }

    /// `D⁻¹ x`
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Defect::Diagonal(d) => x.component_div(d),
            Defect::Dense { factor, .. } => factor.solve(x),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Defect::Diagonal(d) => DMatrix::from_diagonal(d),
            Defect::Dense { d, .. } => d.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointPrior {
    filter_p: Arc<WhiteningFilter>,
    filter_m: Arc<WhiteningFilter>,
    contraction: Contraction,
    mean_p: DVector<f64>,
    mean_m: DVector<f64>,
    defect: Defect,
    ln_det_defect: f64,
}

impl JointPrior {
    pub fn new(
        filter_p: Arc<WhiteningFilter>,
        filter_m: Arc<WhiteningFilter>,
        contraction: Contraction,
        mean_p: DVector<f64>,
        mean_m: DVector<f64>,
    ) -> Result<Self> {
        let (n1, n2) = (filter_p.dim(), filter_m.dim());
        if contraction.shape() != (n1, n2) {
            let (a, b) = contraction.shape();
            return Err(Error::shape("contraction", format!("{n1}x{n2}"), format!("{a}x{b}")));
        }
        if mean_p.len() != n1 {
            return Err(Error::shape("prior mean of p", n1, mean_p.len()));
        }
        if mean_m.len() != n2 {
            return Err(Error::shape("prior mean of m", n2, mean_m.len()));
        }
        let defect = contraction.defect()?;
        let ln_det_defect = contraction.ln_det_defect()?;
        Ok(Self {
            filter_p,
            filter_m,
            contraction,
            mean_p,
            mean_m,
            defect,
            ln_det_defect,
        })
    }

    /// Zero-mean prior.
    pub fn centred(filter_p: Arc<WhiteningFilter>, filter_m: Arc<WhiteningFilter>, contraction: Contraction) -> Result<Self> {
        let (n1, n2) = (filter_p.dim(), filter_m.dim());
        Self::new(filter_p, filter_m, contraction, DVector::zeros(n1), DVector::zeros(n2))
    }

    pub fn n1(&self) -> usize {
        self.filter_p.dim()
    }

    pub fn n2(&self) -> usize {
        self.filter_m.dim()
    }

    pub fn dim(&self) -> usize {
        self.n1() + self.n2()
    }

    pub fn filter_p(&self) -> &Arc<WhiteningFilter> {
        &self.filter_p
    }

    pub fn filter_m(&self) -> &Arc<WhiteningFilter> {
        &self.filter_m
    }

    pub fn contraction(&self) -> &Contraction {
        &self.contraction
    }

    pub fn defect(&self) -> &Defect {
        &self.defect
    }

    pub fn mean(&self) -> DVector<f64> {
        stack(&self.mean_p, &self.mean_m)
    }

    /// `ln |I − C Cᵀ|`
    pub fn ln_det_defect(&self) -> f64 {
        self.ln_det_defect
    }

    /// Maps a standard normal vector to a prior draw.
    pub fn sample_from(&self, eta: &DVector<f64>) -> Result<DVector<f64>> {
        if eta.len() != self.dim() {
            return Err(Error::shape("joint sample noise", self.dim(), eta.len()));
        }
        let (e1, e2) = split(eta, self.n1());
        let p = self.filter_p.apply_inverse(&e1) + &self.mean_p;
        let mixed = self.contraction.apply_transpose(&e1) + self.defect.apply(&e2);
        let m = self.filter_m.apply_inverse(&mixed) + &self.mean_m;
        Ok(stack(&p, &m))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let eta = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        self.sample_from(&eta).expect("noise has the joint dimension")
    }

    /// `L (s − s*)` with the joint whitening filter.
    pub fn whiten(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        if s.len() != self.dim() {
            return Err(Error::shape("joint state", self.dim(), s.len()));
        }
        let (p, m) = split(s, self.n1());
        let a = self.filter_p.apply(&(p - &self.mean_p));
        let b = self.filter_m.apply(&(m - &self.mean_m));
        let lower = self.defect.solve(&(b - self.contraction.apply_transpose(&a)));
        Ok(stack(&a, &lower))
    }

    /// `−½ (‖s − s*‖²_{Γ⁻¹} + ln|I − CCᵀ|)`, the log-det term optional.
    pub fn log_density(&self, s: &DVector<f64>, include_logdet: bool) -> Result<f64> {
        let w = self.whiten(s)?;
        let ld = if include_logdet { self.ln_det_defect } else { 0.0 };
        Ok(-0.5 * (w.norm_squared() + ld))
    }

    /// Dense `L_p⁻¹ C L_m⁻ᵀ`.
    pub fn cross_covariance_dense(&self) -> DMatrix<f64> {
        let lp_inv = self.filter_p.inverse_dense();
        let lm_inv = self.filter_m.inverse_dense();
        let mut c_lm = DMatrix::zeros(self.n1(), self.n2());
        // C L_m⁻ᵀ column j is C applied to row j of L_m⁻¹.
        for j in 0..self.n2() {
            c_lm.set_column(j, &self.contraction.apply(&lm_inv.row(j).transpose()));
        }
        lp_inv * c_lm
    }

    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let (n1, n2) = (self.n1(), self.n2());
        let mut g = DMatrix::zeros(n1 + n2, n1 + n2);
        let cross = self.cross_covariance_dense();
        g.view_mut((0, 0), (n1, n1)).copy_from(&self.filter_p.covariance_dense());
        g.view_mut((n1, n1), (n2, n2)).copy_from(&self.filter_m.covariance_dense());
        g.view_mut((0, n1), (n1, n2)).copy_from(&cross);
        g.view_mut((n1, 0), (n2, n1)).copy_from(&cross.transpose());
        g
    }

    /// Dense `[[L_p, 0], [−D⁻¹CᵀL_p, D⁻¹L_m]]`.
    pub fn whitening_operator_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            e += self.mean();
            out.set_column(j, &self.whiten(&e).expect("dimension checked"));
        }
        out
    }

    /// Whitened cross matrix `Γ_p^{-1/2} Γ_pm Γ_m^{-1/2}` and its singular values.
    pub fn canonical_cross(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let gp = SpdMatrix::from_symmetrized(self.filter_p.covariance_dense())?;
        let gm = SpdMatrix::from_symmetrized(self.filter_m.covariance_dense())?;
        let wp = linalg::inverse_principal_sqrt(&gp)?;
        let wm = linalg::inverse_principal_sqrt(&gm)?;
        let k = wp.matrix() * self.cross_covariance_dense() * wm.matrix();
        let s = linalg::singular_values(&k);
        Ok((k, s))
    }
}

/// Concatenates `p` and `m` into one state.
pub fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Splits a state into its `p` (first `n1`) and `m` parts.
pub fn split(s: &DVector<f64>, n1: usize) -> (DVector<f64>, DVector<f64>) {
    (s.rows(0, n1).into_owned(), s.rows(n1, s.len() - n1).into_owned())
}

/// Scalar log-prior `V(p, m, c)` of a unit-variance pair with correlation `c`,
/// its gradient and Hessian in `(p, m, c)`.
pub fn scalar_prior_stationary(p: f64, m: f64, c: f64) -> Result<(f64, [f64; 3], [[f64; 3]; 3])> {
    if !(c.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("correlation must satisfy |c| < 1 (got {c})")));
    }
    let w = 1.0 - c * c;
    let q = p * p - 2.0 * c * p * m + m * m;
    let v = -q / (2.0 * w) - 0.5 * w.ln();

    let n = p * m * (1.0 + c * c) - c * (p * p + m * m);
    let dn = 2.0 * c * p * m - (p * p + m * m);
    let vp = -(p - c * m) / w;
    let vm = -(m - c * p) / w;
    let vc = n / (w * w) + c / w;

    let vpp = -1.0 / w;
    let vpm = c / w;
    let vpc = (m * w - 2.0 * c * (p - c * m)) / (w * w);
    let vmc = (p * w - 2.0 * c * (m - c * p)) / (w * w);
    let vcc = (dn * w + 4.0 * c * n) / w.powi(3) + (1.0 + c * c) / (w * w);
    Ok((
        v,
        [vp, vm, vc],
        [[vpp, vpm, vpc], [vpm, vpp, vmc], [vpc, vmc, vcc]],
    ))
}

/// `ln cosh x` without overflow.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// `Σ ln(½ sech² γ_i)`, the density induced on `γ` by `tanh(γ) ~ U(−1, 1)`.
pub fn correlation_prior_logdensity(gamma: &[f64]) -> f64 {
    gamma
        .iter()
        .map(|&g| -std::f64::consts::LN_2 - 2.0 * ln_cosh(g))
        .sum()
}

/// `[[I, V̂ᵀCÛ], [ÛᵀCᵀV̂, I]]` for KL coordinates.
pub fn reduced_joint_covariance(basis_p: &KLBasis, basis_m: &KLBasis, c: &Contraction) -> Result<SpdMatrix> {
    let cross = reduced_cross(basis_p, basis_m, c)?;
    let (kp, km) = (basis_p.k(), basis_m.k());
    let mut g = DMatrix::identity(kp + km, kp + km);
    g.view_mut((0, kp), (kp, km)).copy_from(&cross);
    g.view_mut((kp, 0), (km, kp)).copy_from(&cross.transpose());
    SpdMatrix::new(g)
}

/// `V̂ᵀ C Û`
pub fn reduced_cross(basis_p: &KLBasis, basis_m: &KLBasis, c: &Contraction) -> Result<DMatrix<f64>> {
    if c.shape() != (basis_p.dim(), basis_m.dim()) {
        let (a, b) = c.shape();
        return Err(Error::shape(
            "reduced contraction",
            format!("{}x{}", basis_p.dim(), basis_m.dim()),
            format!("{a}x{b}"),
        ));
    }
    let mut cu = DMatrix::zeros(basis_p.dim(), basis_m.k());
    for j in 0..basis_m.k() {
        cu.set_column(j, &c.apply(&basis_m.modes().column(j).into_owned()));
    }
    Ok(basis_p.modes().transpose() * cu)
}
