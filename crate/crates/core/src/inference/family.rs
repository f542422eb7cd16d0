//! Families of joint priors indexed by the correlation coordinates `γ`.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use super::likelihood::{linear_gaussian_posterior, NoiseModel};
use crate::covariance::{KLBasis, WhiteningFilter};
use crate::error::{Error, Result};
use crate::joint_prior::{reduced_cross, split, Contraction, JointPrior};
use crate::linalg::{self, cholesky, CholeskyFactor};

pub type ChainRng = ChaCha8Rng;

/// `γ ↦ ln π(s | γ)` for a fixed state, up to a constant.
pub type CorrelationTarget<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;

/// `s ↦ ln π(s | γ)` for a fixed `γ`.
pub type StateTarget<'a> = Box<dyn Fn(&DVector<f64>) -> f64 + 'a>;

/// Exact conditional draws of `s` given `γ` for a linear model.
pub trait GibbsKernel {
    fn draw(&mut self, gamma: &[f64], rng: &mut ChainRng) -> Result<DVector<f64>>;
}

pub trait PriorFamily: Send + Sync {
    fn dim(&self) -> usize;
    fn n_gamma(&self) -> usize;
    fn mean(&self) -> DVector<f64>;

    /// `ln π(s | γ)` dropping only `γ`-independent constants.
    fn log_density(&self, s: &DVector<f64>, gamma: &[f64]) -> Result<f64>;

    /// Dense prior covariance at `γ`.
    fn covariance(&self, gamma: &[f64]) -> Result<DMatrix<f64>>;

    /// Cached evaluation of [`PriorFamily::log_density`] in `γ` for fixed `s`;
    /// returns `-inf` where `γ` is inadmissible.
    fn correlation_target<'a>(&'a self, s: &DVector<f64>) -> Result<CorrelationTarget<'a>> {
        let s = s.clone();
        Ok(Box::new(move |g| self.log_density(&s, g).unwrap_or(f64::NEG_INFINITY)))
    }

    /// [`PriorFamily::log_density`] at fixed `γ`, with `γ`-dependent work done once.
    /// Non-finite or failing evaluations give `-inf`.
    fn state_target<'a>(&'a self, gamma: &[f64]) -> Result<StateTarget<'a>> {
        let gamma = gamma.to_vec();
        Ok(Box::new(move |s| self.log_density(s, &gamma).unwrap_or(f64::NEG_INFINITY)))
    }

    fn gibbs_kernel<'a>(&'a self, g: &DMatrix<f64>, noise: &NoiseModel, d: &DVector<f64>) -> Result<Box<dyn GibbsKernel + 'a>> {
        check_linear_shapes(self.dim(), g, noise, d)?;
        Ok(Box::new(DenseGibbs {
            family: self.as_dyn(),
            g: g.clone(),
            noise: noise.clone(),
            d: d.clone(),
            cached: None,
        }))
    }

    fn as_dyn(&self) -> &dyn PriorFamily;
}

fn check_linear_shapes(n: usize, g: &DMatrix<f64>, noise: &NoiseModel, d: &DVector<f64>) -> Result<()> {
    if g.ncols() != n {
        return Err(Error::shape("linear model columns", n, g.ncols()));
    }
    if g.nrows() != d.len() || d.len() != noise.len() {
        return Err(Error::shape("linear model rows", g.nrows(), d.len()));
    }
    Ok(())
}

fn standard_normal(n: usize, rng: &mut ChainRng) -> DVector<f64> {
    use rand::Rng;
    DVector::from_fn(n, |_, _| rng.sample(rand_distr::StandardNormal))
}

/// Generic kernel: factorises the full conditional covariance whenever `γ` changes.
struct DenseGibbs<'a> {
    family: &'a dyn PriorFamily,
    g: DMatrix<f64>,
    noise: NoiseModel,
    d: DVector<f64>,
    cached: Option<(Vec<f64>, DVector<f64>, DMatrix<f64>)>,
}

impl GibbsKernel for DenseGibbs<'_> {
    fn draw(&mut self, gamma: &[f64], rng: &mut ChainRng) -> Result<DVector<f64>> {
        if self.cached.as_ref().is_none_or(|c| c.0 != gamma) {
            let cov = self.family.covariance(gamma)?;
            let post = linear_gaussian_posterior(&self.g, &self.noise, &self.d, &self.family.mean(), &cov)?;
            let factor = factor_with_jitter(&post.covariance)?;
            self.cached = Some((gamma.to_vec(), post.mean, factor));
        }
        let (_, mean, factor) = self.cached.as_ref().unwrap();
        let z = standard_normal(mean.len(), rng);
        Ok(mean + factor * z)
    }
}

/// Lower factor of a covariance that may be numerically semidefinite.
pub(crate) fn factor_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = cov.diagonal().max().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut a = cov.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Ok(f) = cholesky(&a) {
            return Ok(f.into_lower());
        }
        jitter = if jitter == 0.0 { 1e-14 * scale } else { jitter * 100.0 };
    }
    cholesky(cov).map(|f| f.into_lower())
}

/// How the contraction depends on `γ`.
#[derive(Debug, Clone)]
pub enum CorrelationStructure {
    /// No correlation coordinates.
    Fixed(Contraction),
    /// Coefficients of the template are `tanh(γ)`.
    Free(Contraction),
}

impl CorrelationStructure {
    pub fn template(&self) -> &Contraction {
        match self {
            CorrelationStructure::Fixed(c) | CorrelationStructure::Free(c) => c,
        }
    }

    pub fn n_gamma(&self) -> usize {
        match self {
            CorrelationStructure::Fixed(_) => 0,
            CorrelationStructure::Free(c) => c.coefficients().len(),
        }
    }

    pub fn contraction(&self, gamma: &[f64]) -> Result<Contraction> {
        match self {
            CorrelationStructure::Fixed(c) => Ok(c.clone()),
            CorrelationStructure::Free(c) => c.with_gamma(gamma),
        }
    }
}

/// Full-space family `Γ(C(γ))` over shared marginal filters.
#[derive(Debug, Clone)]
pub struct JointPriorFamily {
    filter_p: Arc<WhiteningFilter>,
    filter_m: Arc<WhiteningFilter>,
    mean_p: DVector<f64>,
    mean_m: DVector<f64>,
    structure: CorrelationStructure,
}

impl JointPriorFamily {
    pub fn new(
        filter_p: Arc<WhiteningFilter>,
        filter_m: Arc<WhiteningFilter>,
        mean_p: DVector<f64>,
        mean_m: DVector<f64>,
        structure: CorrelationStructure,
    ) -> Result<Self> {
        if let CorrelationStructure::Free(Contraction::Dense(_)) = structure {
            return Err(Error::InvalidArgument("inference over dense contractions is not supported".into()));
        }
        let family = Self {
            filter_p,
            filter_m,
            mean_p,
            mean_m,
            structure,
        };
        // Validates shapes once.
        family.prior(&vec![0.0; family.n_gamma()])?;
        Ok(family)
    }

    pub fn structure(&self) -> &CorrelationStructure {
        &self.structure
    }

    pub fn n1(&self) -> usize {
        self.filter_p.dim()
    }

    pub fn prior(&self, gamma: &[f64]) -> Result<JointPrior> {
        JointPrior::new(
            self.filter_p.clone(),
            self.filter_m.clone(),
            self.structure.contraction(gamma)?,
            self.mean_p.clone(),
            self.mean_m.clone(),
        )
    }

    fn cross_dense(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let lp_inv = self.filter_p.inverse_dense();
        let lm_inv = self.filter_m.inverse_dense();
        lp_inv * c * lm_inv.transpose()
    }
}

impl PriorFamily for JointPriorFamily {
    fn dim(&self) -> usize {
        self.filter_p.dim() + self.filter_m.dim()
    }

    fn n_gamma(&self) -> usize {
        self.structure.n_gamma()
    }

    fn mean(&self) -> DVector<f64> {
        crate::joint_prior::stack(&self.mean_p, &self.mean_m)
    }

    fn log_density(&self, s: &DVector<f64>, gamma: &[f64]) -> Result<f64> {
        self.prior(gamma)?.log_density(s, true)
    }

    fn covariance(&self, gamma: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.prior(gamma)?.covariance_dense())
    }

    fn state_target<'a>(&'a self, gamma: &[f64]) -> Result<StateTarget<'a>> {
        let prior = self.prior(gamma)?;
        Ok(Box::new(move |s| prior.log_density(s, true).unwrap_or(f64::NEG_INFINITY)))
    }

    fn correlation_target<'a>(&'a self, s: &DVector<f64>) -> Result<CorrelationTarget<'a>> {
        if s.len() != self.dim() {
            return Err(Error::shape("joint state", self.dim(), s.len()));
        }
        let (p, m) = split(s, self.n1());
        let a = self.filter_p.apply(&(p - &self.mean_p));
        let b = self.filter_m.apply(&(m - &self.mean_m));
        let aa = a.norm_squared();
        Ok(Box::new(move |gamma| {
            let Ok(c) = self.structure.contraction(gamma) else {
                return f64::NEG_INFINITY;
            };
            let (Ok(defect), Ok(ld)) = (c.defect(), c.ln_det_defect()) else {
                return f64::NEG_INFINITY;
            };
            let w = defect.solve(&(&b - c.apply_transpose(&a)));
            -0.5 * (aa + w.norm_squared() + ld)
        }))
    }

    fn gibbs_kernel<'a>(&'a self, g: &DMatrix<f64>, noise: &NoiseModel, d: &DVector<f64>) -> Result<Box<dyn GibbsKernel + 'a>> {
        check_linear_shapes(self.dim(), g, noise, d)?;
        let (n1, n) = (self.n1(), self.dim());
        let n2 = n - n1;
        let gp = g.columns(0, n1).into_owned();
        let gm = g.columns(n1, n2).into_owned();
        let gamma_p = self.filter_p.covariance_dense();
        let gamma_m = self.filter_m.covariance_dense();

        // Γ(c) Gᵀ and G Γ(c) Gᵀ are affine in the coefficients c.
        let block = |top: DMatrix<f64>, bottom: DMatrix<f64>| {
            let mut out = DMatrix::zeros(n, g.nrows());
            out.view_mut((0, 0), (n1, g.nrows())).copy_from(&top);
            out.view_mut((n1, 0), (n2, g.nrows())).copy_from(&bottom);
            out
        };
        let (base_c, parts): (DMatrix<f64>, Vec<DMatrix<f64>>) = match &self.structure {
            CorrelationStructure::Fixed(c) => (c.to_dense(), Vec::new()),
            CorrelationStructure::Free(t) => (
                DMatrix::zeros(n1, n2),
                (0..t.coefficients().len()).map(|l| t.coefficient_basis(l).unwrap()).collect(),
            ),
        };
        let cross0 = self.cross_dense(&base_c);
        let p0 = block(
            &gamma_p * gp.transpose() + &cross0 * gm.transpose(),
            cross0.transpose() * gp.transpose() + &gamma_m * gm.transpose(),
        );
        let s0 = g * &p0 + noise.covariance();
        let mut p_parts = Vec::with_capacity(parts.len());
        let mut s_parts = Vec::with_capacity(parts.len());
        for cl in &parts {
            let x = self.cross_dense(cl);
            let pl = block(&x * gm.transpose(), x.transpose() * gp.transpose());
            s_parts.push(g * &pl);
            p_parts.push(pl);
        }
        Ok(Box::new(MatheronGibbs {
            family: self,
            g: g.clone(),
            noise: noise.clone(),
            d: d.clone(),
            p0,
            s0,
            p_parts,
            s_parts,
            cached: None,
        }))
    }

    fn as_dyn(&self) -> &dyn PriorFamily {
        self
    }
}

/// Conditional draws by perturbing a prior draw:
/// `s = s_pr + Γ Gᵀ (G Γ Gᵀ + Γ_e)⁻¹ (d − G s_pr − e)`.
struct MatheronGibbs<'a> {
    family: &'a JointPriorFamily,
    g: DMatrix<f64>,
    noise: NoiseModel,
    d: DVector<f64>,
    p0: DMatrix<f64>,
    s0: DMatrix<f64>,
    p_parts: Vec<DMatrix<f64>>,
    s_parts: Vec<DMatrix<f64>>,
    cached: Option<(Vec<f64>, JointPrior, DMatrix<f64>, CholeskyFactor)>,
}

impl GibbsKernel for MatheronGibbs<'_> {
    fn draw(&mut self, gamma: &[f64], rng: &mut ChainRng) -> Result<DVector<f64>> {
        if self.cached.as_ref().is_none_or(|c| c.0 != gamma) {
            let prior = self.family.prior(gamma)?;
            let mut p = self.p0.clone();
            let mut s = self.s0.clone();
            for (l, g) in gamma.iter().enumerate() {
                let c = g.tanh();
                p += &self.p_parts[l] * c;
                s += &self.s_parts[l] * c;
            }
            let factor = cholesky(&linalg::symmetrize(&s))?;
            self.cached = Some((gamma.to_vec(), prior, p, factor));
        }
        let (_, prior, p, factor) = self.cached.as_ref().unwrap();
        let s_pr = prior.sample(rng);
        if self.d.is_empty() {
            return Ok(s_pr);
        }
        let e = self.noise.sample(rng);
        let resid = &self.d - &self.g * &s_pr - e;
        Ok(s_pr + p * factor.solve(&resid))
    }
}

/// Family over truncated KL coordinates with covariance `[[I, Q], [Qᵀ, I]]`,
/// `Q = V̂ᵀ C(γ) Û`.
#[derive(Debug, Clone)]
pub struct ReducedPriorFamily {
    kp: usize,
    km: usize,
    fixed: DMatrix<f64>,
    parts: Vec<DMatrix<f64>>,
    /// Symmetrised Gram products on the smaller side, `(a, b, G_ab + G_ba)` for
    /// `a < b` and `(a, a, G_aa)`, where `G_ab = Q_a Q_bᵀ` if `kp <= km`, else
    /// `Q_aᵀ Q_b`; index 0 is the fixed part.
    gram: Vec<(usize, usize, DMatrix<f64>)>,
}

impl ReducedPriorFamily {
    pub fn new(basis_p: &KLBasis, basis_m: &KLBasis, structure: &CorrelationStructure) -> Result<Self> {
        let (fixed, parts) = match structure {
            CorrelationStructure::Fixed(c) => (reduced_cross(basis_p, basis_m, c)?, Vec::new()),
            CorrelationStructure::Free(t) => {
                if matches!(t, Contraction::Dense(_)) {
                    return Err(Error::InvalidArgument("inference over dense contractions is not supported".into()));
                }
                let zero = Contraction::zero(basis_p.dim(), basis_m.dim());
                let fixed = reduced_cross(basis_p, basis_m, &zero)?;
                let parts = (0..t.coefficients().len())
                    .map(|l| basis_p.modes().transpose() * t.coefficient_basis(l).unwrap() * basis_m.modes())
                    .collect();
                (fixed, parts)
            }
        };
        let (kp, km) = (basis_p.k(), basis_m.k());
        let all: Vec<&DMatrix<f64>> = std::iter::once(&fixed).chain(parts.iter()).collect();
        let prod = |a: &DMatrix<f64>, b: &DMatrix<f64>| if kp <= km { a * b.transpose() } else { a.tr_mul(b) };
        let mut gram = Vec::new();
        for a in 0..all.len() {
            for b in a..all.len() {
                let g = prod(all[a], all[b]);
                let g = if a == b { linalg::symmetrize(&g) } else { &g + g.transpose() };
                if g.amax() > 0.0 {
                    gram.push((a, b, g));
                }
            }
        }
        Ok(Self {
            kp,
            km,
            fixed,
            parts,
            gram,
        })
    }

    pub fn kp(&self) -> usize {
        self.kp
    }

    pub fn km(&self) -> usize {
        self.km
    }

    /// `Q(γ)`
    pub fn cross(&self, gamma: &[f64]) -> Result<DMatrix<f64>> {
        self.check_gamma(gamma)?;
        let mut q = self.fixed.clone();
        for (l, g) in gamma.iter().enumerate() {
            q += &self.parts[l] * g.tanh();
        }
        Ok(q)
    }

    fn check_gamma(&self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.parts.len() {
            return Err(Error::shape("correlation coordinates", self.parts.len(), gamma.len()));
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("correlation coordinates".into()));
        }
        Ok(())
    }

    /// Factor of `I − QQᵀ` (or `I − QᵀQ`) assembled from the cached Gram products.
    fn schur_factor(&self, gamma: &[f64]) -> Result<CholeskyFactor> {
        let k = self.kp.min(self.km);
        let w: Vec<f64> = std::iter::once(1.0).chain(gamma.iter().map(|g| g.tanh())).collect();
        let mut m = DMatrix::identity(k, k);
        for (a, b, g) in &self.gram {
            let c = w[*a] * w[*b];
            for (x, y) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *x -= c * y;
            }
        }
        cholesky(&m)
    }

    fn density_with(&self, s: &DVector<f64>, q: &DMatrix<f64>, factor: &CholeskyFactor) -> f64 {
        let (x, y) = split(s, self.kp);
        let (outer, r) = if self.kp <= self.km {
            (y.norm_squared(), x - q * y)
        } else {
            (x.norm_squared(), y - q.tr_mul(&x))
        };
        let z = factor.solve_lower(&r);
        -0.5 * (outer + z.norm_squared() + factor.logdet())
    }
}

impl PriorFamily for ReducedPriorFamily {
    fn dim(&self) -> usize {
        self.kp + self.km
    }

    fn n_gamma(&self) -> usize {
        self.parts.len()
    }

    fn mean(&self) -> DVector<f64> {
        DVector::zeros(self.dim())
    }

    /// Uses `ln|Γ̂(γ)|`, the normalising term of the reduced density itself.
    fn log_density(&self, s: &DVector<f64>, gamma: &[f64]) -> Result<f64> {
        if s.len() != self.dim() {
            return Err(Error::shape("reduced state", self.dim(), s.len()));
        }
        let q = self.cross(gamma)?;
        let factor = self.schur_factor(gamma)?;
        Ok(self.density_with(s, &q, &factor))
    }

    fn correlation_target<'a>(&'a self, s: &DVector<f64>) -> Result<CorrelationTarget<'a>> {
        if s.len() != self.dim() {
            return Err(Error::shape("reduced state", self.dim(), s.len()));
        }
        let (x, y) = split(s, self.kp);
        let all = std::iter::once(&self.fixed).chain(self.parts.iter());
        // Residual pieces on the smaller side: r = base − Σ w_a v_a.
        let (outer, base, pieces): (f64, DVector<f64>, Vec<DVector<f64>>) = if self.kp <= self.km {
            (y.norm_squared(), x, all.map(|q| q * &y).collect())
        } else {
            (x.norm_squared(), y, all.map(|q| q.tr_mul(&x)).collect())
        };
        let k = self.kp.min(self.km);
        // Called many times per state; work in place on reused buffers.
        let scratch = RefCell::new((vec![0.0; k * k], vec![0.0; k]));
        Ok(Box::new(move |gamma| {
            if self.check_gamma(gamma).is_err() {
                return f64::NEG_INFINITY;
            }
            let w: Vec<f64> = std::iter::once(1.0).chain(gamma.iter().map(|g| g.tanh())).collect();
            let mut guard = scratch.borrow_mut();
            let (a, r) = &mut *guard;
            a.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..k {
                a[i * k + i] = 1.0;
            }
            for (ia, ib, g) in &self.gram {
                let c = w[*ia] * w[*ib];
                // Column-major and symmetric, so the flat layout can be read as row-major.
                for (x, y) in a.iter_mut().zip(g.as_slice()) {
                    *x -= c * y;
                }
            }
            for (i, ri) in r.iter_mut().enumerate() {
                *ri = base[i] - pieces.iter().zip(&w).map(|(v, wa)| wa * v[i]).sum::<f64>();
            }
            match linalg::cholesky_solve_in_place(a, k, r) {
                Some((logdet, quad)) => -0.5 * (outer + quad + logdet),
                None => f64::NEG_INFINITY,
            }
        }))
    }

    fn state_target<'a>(&'a self, gamma: &[f64]) -> Result<StateTarget<'a>> {
        let q = self.cross(gamma)?;
        let factor = self.schur_factor(gamma)?;
        let n = self.dim();
        Ok(Box::new(move |s| {
            if s.len() != n {
                return f64::NEG_INFINITY;
            }
            self.density_with(s, &q, &factor)
        }))
    }

    fn covariance(&self, gamma: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.cross(gamma)?;
        let (kp, km) = (self.kp, self.km);
        let mut g = DMatrix::identity(kp + km, kp + km);
        g.view_mut((0, kp), (kp, km)).copy_from(&q);
        g.view_mut((kp, 0), (km, kp)).copy_from(&q.transpose());
        Ok(g)
    }

    fn as_dyn(&self) -> &dyn PriorFamily {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{kl_truncate, whitening_filter, FilterKind};
    use crate::linalg::SpdMatrix;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, rng: &mut ChainRng) -> SpdMatrix {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        SpdMatrix::from_symmetrized(&a * a.transpose() + DMatrix::identity(n, n) * 0.3).unwrap()
    }

    fn family(n1: usize, n2: usize, structure: CorrelationStructure, seed: u64) -> JointPriorFamily {
        let mut rng = ChainRng::seed_from_u64(seed);
        let fp = Arc::new(whitening_filter(&random_spd(n1, &mut rng), FilterKind::PrincipalSqrt).unwrap());
        let fm = Arc::new(whitening_filter(&random_spd(n2, &mut rng), FilterKind::Cholesky).unwrap());
        let mp = DVector::from_fn(n1, |i, _| 0.1 * i as f64);
        let mm = DVector::from_fn(n2, |i, _| -0.3 * i as f64);
        JointPriorFamily::new(fp, fm, mp, mm, structure).unwrap()
    }

    #[test]
    fn correlation_target_matches_log_density() {
        let t = Contraction::piecewise(vec![0, 1, 1, 0], vec![0.0, 0.0]).unwrap();
        let fam = family(4, 4, CorrelationStructure::Free(t), 3);
        let s = DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin());
        let target = fam.correlation_target(&s).unwrap();
        for gamma in [[0.0, 0.0], [1.2, -0.4], [-3.0, 2.5]] {
            let direct = fam.log_density(&s, &gamma).unwrap();
            assert!((target(&gamma) - direct).abs() < 1e-10);
        }
        assert_eq!(target(&[40.0, 0.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn matheron_kernel_matches_dense_posterior() {
        let t = Contraction::scalar(0.0, 3, 3).unwrap();
        let fam = family(3, 3, CorrelationStructure::Free(t), 8);
        let g = DMatrix::from_fn(4, 6, |i, j| if (i + j) % 3 == 0 { 1.0 } else { 0.2 * (i as f64 - j as f64) });
        let noise = NoiseModel::new(vec![(2, 0.3), (2, 0.5)]).unwrap();
        let d = DVector::from_vec(vec![1.0, -0.5, 0.3, 2.0]);
        let gamma = [0.8];
        let post = linear_gaussian_posterior(&g, &noise, &d, &fam.mean(), &fam.covariance(&gamma).unwrap()).unwrap();
        let mut kernel = fam.gibbs_kernel(&g, &noise, &d).unwrap();
        let mut rng = ChainRng::seed_from_u64(1);
        let n = 100_000;
        let mut mean = DVector::zeros(6);
        let mut cov = DMatrix::zeros(6, 6);
        let draws: Vec<DVector<f64>> = (0..n).map(|_| kernel.draw(&gamma, &mut rng).unwrap()).collect();
        for x in &draws {
            mean += x;
        }
        mean /= n as f64;
        for x in &draws {
            let r = x - &mean;
            cov.ger(1.0, &r, &r, 1.0);
        }
        cov /= n as f64;
        assert!((mean - &post.mean).amax() < 0.01);
        assert!((cov - &post.covariance).amax() < 0.02);
    }

    #[test]
    fn reduced_density_matches_dense() {
        let mut rng = ChainRng::seed_from_u64(12);
        let gp = random_spd(7, &mut rng);
        let gm = random_spd(7, &mut rng);
        let labels = vec![0, 0, 0, 1, 1, 1, 1];
        let t = Contraction::piecewise(labels, vec![0.0, 0.0]).unwrap();
        for (kp, km) in [(3, 5), (5, 2), (4, 4)] {
            let (bp, bm) = (kl_truncate(&gp, kp).unwrap(), kl_truncate(&gm, km).unwrap());
            let fam = ReducedPriorFamily::new(&bp, &bm, &CorrelationStructure::Free(t.clone())).unwrap();
            let s = DVector::from_fn(kp + km, |i, _| (1.0 + i as f64).ln() - 1.0);
            for gamma in [[0.0, 0.0], [1.5, -2.0]] {
                let cov = SpdMatrix::new(fam.covariance(&gamma).unwrap()).unwrap();
                let oracle = -0.5 * (s.dot(&cov.factor().solve(&s)) + cov.factor().logdet());
                assert!((fam.log_density(&s, &gamma).unwrap() - oracle).abs() < 1e-9);
                let c = t.with_gamma(&gamma).unwrap();
                let direct = crate::joint_prior::reduced_joint_covariance(&bp, &bm, &c).unwrap();
                assert!((direct.matrix() - cov.matrix()).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn reduced_correlation_target_matches_log_density() {
        let mut rng = ChainRng::seed_from_u64(31);
        let gp = random_spd(6, &mut rng);
        let gm = random_spd(6, &mut rng);
        let t = Contraction::piecewise(vec![0, 0, 1, 1, 1, 0], vec![0.0, 0.0]).unwrap();
        for (kp, km) in [(2, 4), (4, 3)] {
            let fam = ReducedPriorFamily::new(&kl_truncate(&gp, kp).unwrap(), &kl_truncate(&gm, km).unwrap(), &CorrelationStructure::Free(t.clone())).unwrap();
            let s = DVector::from_fn(kp + km, |i, _| (i as f64 * 1.3).cos());
            let target = fam.correlation_target(&s).unwrap();
            for gamma in [[0.0, 0.0], [0.7, -1.9], [3.0, 2.0]] {
                assert!((target(&gamma) - fam.log_density(&s, &gamma).unwrap()).abs() < 1e-10);
            }
            assert_eq!(target(&[f64::NAN, 0.0]), f64::NEG_INFINITY);
        }
    }

    #[test]
    fn zero_contraction_decouples_conditionals() {
        let fam = family(3, 3, CorrelationStructure::Fixed(Contraction::zero(3, 3)), 5);
        let g = DMatrix::identity(6, 6);
        let noise = NoiseModel::iid(6, 0.5).unwrap();
        let d = DVector::from_element(6, 1.0);
        let mut kernel = fam.gibbs_kernel(&g, &noise, &d).unwrap();
        let mut rng = ChainRng::seed_from_u64(2);
        let draws: Vec<DVector<f64>> = (0..50_000).map(|_| kernel.draw(&[], &mut rng).unwrap()).collect();
        let mean = draws.iter().fold(DVector::zeros(6), |a, x| a + x) / draws.len() as f64;
        let mut cross: f64 = 0.0;
        for i in 0..3 {
            for j in 3..6 {
                let c: f64 = draws.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / draws.len() as f64;
                cross = cross.max(c.abs());
            }
        }
        assert!(cross < 0.02);
    }

    #[test]
    fn tiny_noise_concentrates_on_data() {
        let fam = family(2, 2, CorrelationStructure::Fixed(Contraction::scalar(0.5, 2, 2).unwrap()), 7);
        let g = DMatrix::from_row_slice(4, 4, &[2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5, 1.0]);
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let noise = NoiseModel::iid(4, 1e-6).unwrap();
        let target = g.clone().try_inverse().unwrap() * &d;
        let mut kernel = fam.gibbs_kernel(&g, &noise, &d).unwrap();
        let mut rng = ChainRng::seed_from_u64(4);
        for _ in 0..100 {
            assert!((kernel.draw(&[], &mut rng).unwrap() - &target).norm() < 1e-3);
        }
    }
}
