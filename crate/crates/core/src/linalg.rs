//! Dense symmetric-positive-definite linear algebra.
//!
//! Everything here works on `nalgebra` dense matrices. The Cholesky
//! factorisation is implemented locally so that a failure can report the
//! offending pivot; eigen- and singular-value decompositions are delegated to
//! `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry accepted by [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Margin used to decide strict contraction in floating point.
pub const CONTRACTION_MARGIN: f64 = 1e-12;
/// Eigenvalues below `EIGEN_FLOOR * lambda_max` are rejected by spectral routines.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Lower-triangular Cholesky factor `R` with `R Rᵀ = A`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn into_lower(self) -> DMatrix<f64> {
        self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `R x`
    pub fn mul_lower(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut out = DVector::zeros(n);
        for j in 0..n {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let col = self.lower.column(j);
            for i in j..n {
                out[i] += col[i] * xj;
            }
        }
        out
    }

    /// `Rᵀ x`
    pub fn mul_upper(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        DVector::from_fn(n, |j, _| {
            let col = self.lower.column(j);
            (j..n).map(|i| col[i] * x[i]).sum()
        })
    }

    /// Solves `R x = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for j in 0..n {
            let col = self.lower.column(j);
            x[j] /= col[j];
            let xj = x[j];
            if xj != 0.0 {
                for i in j + 1..n {
                    x[i] -= col[i] * xj;
                }
            }
        }
        x
    }

    /// Solves `Rᵀ x = b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut x = b.clone();
        for j in (0..n).rev() {
            let col = self.lower.column(j);
            let mut s = x[j];
            for i in j + 1..n {
                s -= col[i] * x[i];
            }
            x[j] = s / col[j];
        }
        x
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (j, col) in b.column_iter().enumerate() {
            out.set_column(j, &self.solve(&col.into_owned()));
        }
        out
    }

    /// Solves `R X = B` column by column.
    pub fn solve_lower_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (j, col) in b.column_iter().enumerate() {
            out.set_column(j, &self.solve_lower(&col.into_owned()));
        }
        out
    }

    /// `ln det A = 2 Σ ln R_ii`
    pub fn logdet(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        symmetrize(&self.solve_matrix(&DMatrix::identity(n, n)))
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

/// Cholesky factorisation `A = R Rᵀ` with `R` lower triangular.
///
/// Only the lower triangle of `a` is read. Fails with the index of the first
/// non-positive (or non-finite) pivot.
pub fn cholesky(a: &DMatrix<f64>) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::shape(
            "cholesky",
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    let n = a.nrows();
    // Row-major lower triangle so that the inner products run over contiguous memory.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            let dot: f64 = ri.iter().zip(rj).map(|(x, y)| x * y).sum();
            let s = a[(i, j)] - dot;
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(CholeskyFactor {
        lower: DMatrix::from_row_slice(n, n, &l),
    })
}

/// A symmetric positive definite matrix together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    factor: CholeskyFactor,
}

impl SpdMatrix {
    /// Validates symmetry (relative tolerance [`SYMMETRY_TOL`]) and positive
    /// definiteness (via factorisation).
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&matrix)?;
        let factor = cholesky(&matrix)?;
        Ok(Self { matrix, factor })
    }

    /// Symmetrises `matrix` by averaging with its transpose before validating.
    pub fn from_symmetrized(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::shape(
                "spd matrix",
                "square matrix",
                format!("{}x{}", matrix.nrows(), matrix.ncols()),
            ));
        }
        Self::new(symmetrize(&matrix))
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n)).expect("identity is SPD")
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::shape(
            "symmetric matrix",
            "square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let diff = (m[(i, j)] - m[(j, i)]).abs();
            if diff > SYMMETRY_TOL * scale || diff.is_nan() {
                return Err(Error::NotSymmetric {
                    row: i,
                    col: j,
                    difference: diff,
                });
            }
        }
    }
    Ok(())
}

/// Overwrites the row-major `n × n` SPD matrix `a` with its lower Cholesky
/// factor and `r` with `L⁻¹ r`; returns `(ln|a|, ‖L⁻¹ r‖²)`, or `None` if `a`
/// is not numerically positive definite.
pub fn cholesky_solve_in_place(a: &mut [f64], n: usize, r: &mut [f64]) -> Option<(f64, f64)> {
    let mut logdet = 0.0;
    for i in 0..n {
        for j in 0..=i {
            let (head, tail) = a.split_at_mut(i * n);
            let row_i = &tail[..n];
            let dot: f64 = if j == i {
                row_i[..j].iter().map(|x| x * x).sum()
            } else {
                row_i[..j].iter().zip(&head[j * n..j * n + j]).map(|(x, y)| x * y).sum()
            };
            let s = row_i[j] - dot;
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                let d = s.sqrt();
                tail[j] = d;
                logdet += 2.0 * d.ln();
            } else {
                tail[j] = s / head[j * n + j];
            }
        }
    }
    let mut quad = 0.0;
    for i in 0..n {
        let row = &a[i * n..i * n + i];
        let z = (r[i] - row.iter().zip(&r[..i]).map(|(x, y)| x * y).sum::<f64>()) / a[i * n + i];
        r[i] = z;
        quad += z * z;
    }
    Some((logdet, quad))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: DMatrix<f64>,
}

pub fn sym_eig(a: &DMatrix<f64>) -> Result<SymEig> {
    check_symmetric(a)?;
    let eig = SymmetricEigen::new(a.clone());
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { values, vectors })
}

/// `Q f(Λ) Qᵀ` for an SPD matrix, rejecting eigenvalues below the floor.
fn spectral_function(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let eig = sym_eig(a)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lmax = eig.values[0];
    let lmin = eig.values[n - 1];
    let floor = EIGEN_FLOOR * lmax.abs();
    if !(lmin > floor) {
        return Err(Error::EigenvalueTooSmall { value: lmin, floor });
    }
    let mut scaled = eig.vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(eig.values[j]);
    }
    Ok(symmetrize(&(scaled * eig.vectors.transpose())))
}

/// Principal square root `S = Q Λ^{1/2} Qᵀ`.
pub fn principal_sqrt(a: &SpdMatrix) -> Result<SpdMatrix> {
    SpdMatrix::new(spectral_function(a.matrix(), f64::sqrt)?)
}

/// Inverse principal square root `Q Λ^{-1/2} Qᵀ`.
pub fn inverse_principal_sqrt(a: &SpdMatrix) -> Result<SpdMatrix> {
    SpdMatrix::new(spectral_function(a.matrix(), |l| 1.0 / l.sqrt())?)
}

pub fn singular_values(c: &DMatrix<f64>) -> DVector<f64> {
    if c.nrows() == 0 || c.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut s = c.clone().svd(false, false).singular_values;
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    s
}

/// Largest singular value.
pub fn spectral_norm(c: &DMatrix<f64>) -> f64 {
    singular_values(c).iter().copied().fold(0.0, f64::max)
}

pub fn is_diagonal(c: &DMatrix<f64>) -> bool {
    c.iter().enumerate().all(|(k, &v)| {
        let (i, j) = (k % c.nrows(), k / c.nrows());
        i == j || v == 0.0
    })
}

/// Symmetric defect factor `D = (I - CᵀC)^{1/2}` of a strict contraction.
pub fn defect_factor(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n2 = c.ncols();
    if is_diagonal(c) {
        let k = c.nrows().min(n2);
        let sigma_max = (0..k).map(|i| c[(i, i)].abs()).fold(0.0, f64::max);
        if sigma_max >= 1.0 - CONTRACTION_MARGIN {
            return Err(Error::NotStrictContraction { sigma_max });
        }
        let d = DVector::from_fn(n2, |j, _| if j < k { (1.0 - c[(j, j)].powi(2)).sqrt() } else { 1.0 });
        return Ok(DMatrix::from_diagonal(&d));
    }
    let sigma_max = spectral_norm(c);
    if sigma_max >= 1.0 - CONTRACTION_MARGIN {
        return Err(Error::NotStrictContraction { sigma_max });
    }
    let gram = DMatrix::identity(n2, n2) - c.transpose() * c;
    spectral_function(&symmetrize(&gram), f64::sqrt)
}

pub fn logdet_spd(a: &SpdMatrix) -> f64 {
    a.factor().logdet()
}
