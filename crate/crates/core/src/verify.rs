//! Property checks against independent oracles: dense determinants, dense
//! factorisations, finite differences, AR(1) theory and a Poisson series.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{whitening_filter, FilterKind, WhiteningFilter};
use crate::diagnostics::ess;
use crate::error::Result;
use crate::experiments::cokrige::{CokrigeConfig, CokrigeSetup};
use crate::experiments::MeshConfig;
use crate::joint_prior::{scalar_prior_stationary, Contraction, JointPrior};
use crate::linalg::{self, SpdMatrix};
use crate::mesh_fem::{build_lattice_mesh, poisson_unit_square_series, solve_darcy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random instances for the covariance-validity check; other checks use half.
    pub instances: usize,
    pub max_dim: usize,
    pub mc_samples: usize,
    pub ess_chain_length: usize,
    /// Mesh for the sign-invariance check.
    pub sign_mesh: MeshConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 99,
            instances: 100,
            max_dim: 50,
            mc_samples: 200_000,
            ess_chain_length: 500_000,
            sign_mesh: CokrigeConfig::default().mesh,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed discrepancy.
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    fn new(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: measured <= tolerance,
            measured,
            tolerance,
            detail,
            seconds: 0.0,
        }
    }
}

fn timed(f: impl FnOnce() -> Result<CheckResult>) -> Result<CheckResult> {
    let t = Instant::now();
    let mut r = f()?;
    r.seconds = t.elapsed().as_secs_f64();
    Ok(r)
}

pub fn run_suite(cfg: &VerifyConfig) -> Result<Vec<CheckResult>> {
    let half = cfg.instances.div_ceil(2);
    Ok(vec![
        timed(|| covariance_validity(cfg.instances, cfg.max_dim, cfg.seed))?,
        timed(|| defect_identities(half, cfg.max_dim, cfg.seed.wrapping_add(1)))?,
        timed(|| optimality_principal(half, cfg.max_dim, cfg.seed.wrapping_add(2)))?,
        timed(|| optimality_cholesky(half, cfg.max_dim, cfg.seed.wrapping_add(3)))?,
        timed(|| whitening_round_trip(cfg.seed.wrapping_add(4)))?,
        timed(|| monte_carlo_covariance(cfg.mc_samples, cfg.seed.wrapping_add(5)))?,
        timed(|| logdet_shortcuts(half, cfg.max_dim, cfg.seed.wrapping_add(6)))?,
        timed(saddle_at_origin)?,
        timed(|| saddle_gradient_fd(20, cfg.seed.wrapping_add(7)))?,
        timed(|| sign_invariance(&cfg.sign_mesh))?,
        timed(|| ess_oracles(cfg.ess_chain_length, cfg.seed.wrapping_add(8)))?,
        timed(poisson_oracle)?,
    ])
}

// ---- random instances ----

/// SPD with eigenvalues bounded away from zero and unit-order entries.
pub fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let m = (&a * a.transpose()) / n as f64 + DMatrix::identity(n, n) * 0.5;
    SpdMatrix::from_symmetrized(m).expect("shifted Gram matrix is SPD")
}

/// Filter of the given kind and the covariance it is meant to represent,
/// computed without going through the filter.
pub fn random_filter(n: usize, kind: FilterKind, rng: &mut ChaCha8Rng) -> Result<(WhiteningFilter, DMatrix<f64>)> {
    match kind {
        FilterKind::PrecisionSqrt => {
            let op = random_spd(n, rng).into_matrix() + DMatrix::identity(n, n);
            let sq = &op * &op;
            let cov = linalg::symmetrize(&sq.clone().try_inverse().expect("SPD is invertible"));
            Ok((WhiteningFilter::from_precision_sqrt(op)?, cov))
        }
        _ => {
            let g = random_spd(n, rng);
            Ok((whitening_filter(&g, kind)?, g.into_matrix()))
        }
    }
}

fn random_kind(rng: &mut ChaCha8Rng) -> FilterKind {
    [FilterKind::Cholesky, FilterKind::PrincipalSqrt, FilterKind::PrecisionSqrt][rng.random_range(0..3)]
}

fn coefficient(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-0.95..0.95)
}

/// Variant `0..4`: scalar, piecewise (square), paired sparse, dense.
pub fn random_contraction(variant: usize, n1: usize, n2: usize, rng: &mut ChaCha8Rng) -> Result<Contraction> {
    match variant % 4 {
        0 => Contraction::scalar(coefficient(rng), n1, n2),
        1 => {
            let pieces = rng.random_range(1..=3);
            let labels = (0..n1).map(|_| rng.random_range(0..pieces)).collect();
            Contraction::piecewise(labels, (0..pieces).map(|_| coefficient(rng)).collect())
        }
        2 => {
            let k = rng.random_range(1..=n1.min(n2));
            let mut rows: Vec<usize> = (0..n1).collect();
            let mut cols: Vec<usize> = (0..n2).collect();
            rows.shuffle(rng);
            cols.shuffle(rng);
            rows.truncate(k);
            cols.truncate(k);
            Contraction::paired_sparse(n1, n2, rows, cols, (0..k).map(|_| coefficient(rng)).collect())
        }
        _ => {
            let c = DMatrix::from_fn(n1, n2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let target = rng.random_range(0.05..0.95);
            Contraction::dense(&c * (target / linalg::spectral_norm(&c)))
        }
    }
}

pub struct Instance {
    pub prior: JointPrior,
    pub cov_p: DMatrix<f64>,
    pub cov_m: DMatrix<f64>,
}

/// Random joint prior; `kinds` fixes the two filter kinds when given.
pub fn random_instance(
    variant: usize,
    max_dim: usize,
    kinds: Option<(FilterKind, FilterKind)>,
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    let n1 = rng.random_range(1..=max_dim.max(1));
    let n2 = if variant % 4 == 1 { n1 } else { rng.random_range(1..=max_dim.max(1)) };
    let (kp, km) = kinds.unwrap_or_else(|| (random_kind(rng), random_kind(rng)));
    let (fp, cov_p) = random_filter(n1, kp, rng)?;
    let (fm, cov_m) = random_filter(n2, km, rng)?;
    let c = random_contraction(variant, n1, n2, rng)?;
    let mp = DVector::from_fn(n1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mm = DVector::from_fn(n2, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(Instance {
        prior: JointPrior::new(Arc::new(fp), Arc::new(fm), c, mp, mm)?,
        cov_p,
        cov_m,
    })
}

/// `ln det` from a dense LU factorisation.
pub fn lu_logdet(a: &DMatrix<f64>) -> f64 {
    let lu = a.clone().lu();
    lu.u().diagonal().iter().map(|d| d.abs().ln()).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

// ---- checks ----

/// Densified joint covariance factorises and keeps both marginals.
pub fn covariance_validity(instances: usize, max_dim: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut failures) = (0.0f64, 0);
    for i in 0..instances {
        let inst = random_instance(i, max_dim, None, &mut rng)?;
        let (n1, n2) = (inst.prior.n1(), inst.prior.n2());
        let g = inst.prior.covariance_dense();
        if linalg::cholesky(&g).is_err() {
            failures += 1;
        }
        let scale = |m: &DMatrix<f64>| m.amax().max(1.0);
        let ep = (g.view((0, 0), (n1, n1)) - &inst.cov_p).amax() / scale(&inst.cov_p);
        let em = (g.view((n1, n1), (n2, n2)) - &inst.cov_m).amax() / scale(&inst.cov_m);
        worst = worst.max(ep).max(em);
    }
    let mut r = CheckResult::new(
        "joint covariance SPD with preserved marginals",
        worst,
        1e-12,
        format!("{instances} instances, {failures} Cholesky failures, max marginal block error {worst:.2e}"),
    );
    r.passed &= failures == 0;
    Ok(r)
}

/// `D² = I − CᵀC` and the joint filter whitens the dense covariance.
pub fn defect_identities(instances: usize, max_dim: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut defect_err, mut white_err) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let inst = random_instance(i, max_dim.min(30), None, &mut rng)?;
        let c = inst.prior.contraction().to_dense();
        let d = inst.prior.defect().to_dense();
        let n2 = c.ncols();
        defect_err = defect_err.max((&d * &d - (DMatrix::identity(n2, n2) - c.transpose() * &c)).amax());
        defect_err = defect_err.max((&d - d.transpose()).amax());
        let l = inst.prior.whitening_operator_dense();
        let n = l.nrows();
        let w = &l * inst.prior.covariance_dense() * l.transpose();
        white_err = white_err.max((w - DMatrix::identity(n, n)).amax());
    }
    let worst = defect_err.max(white_err);
    Ok(CheckResult::new(
        "defect identities and joint whitening",
        worst,
        1e-9,
        format!("max |D² − (I − CᵀC)| {defect_err:.2e}, max |L Γ Lᵀ − I| {white_err:.2e}"),
    ))
}

/// Principal-root filters on both sides give a whitened cross matrix equal to `C`.
pub fn optimality_principal(instances: usize, max_dim: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let kinds = (FilterKind::PrincipalSqrt, FilterKind::PrincipalSqrt);
    for i in 0..instances {
        let inst = random_instance(i, max_dim, Some(kinds), &mut rng)?;
        let (k, _) = inst.prior.canonical_cross()?;
        worst = worst.max((k - inst.prior.contraction().to_dense()).amax());
    }
    Ok(CheckResult::new(
        "principal root: whitened cross equals C",
        worst,
        1e-9,
        format!("{instances} instances, max entrywise error {worst:.2e}"),
    ))
}

/// Cholesky filters keep the canonical correlations `σ(C)`.
pub fn optimality_cholesky(instances: usize, max_dim: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let kinds = (FilterKind::Cholesky, FilterKind::Cholesky);
    for i in 0..instances {
        let inst = random_instance(i, max_dim, Some(kinds), &mut rng)?;
        let (_, s) = inst.prior.canonical_cross()?;
        let mut got: Vec<f64> = s.iter().copied().collect();
        let mut want: Vec<f64> = linalg::singular_values(&inst.prior.contraction().to_dense()).iter().copied().collect();
        got.sort_by(|a, b| b.total_cmp(a));
        want.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckResult::new(
        "Cholesky: canonical correlations equal σ(C)",
        worst,
        1e-9,
        format!("{instances} instances, max singular value error {worst:.2e}"),
    ))
}

/// `whiten(sample_from(η)) = η`.
pub fn whitening_round_trip(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..40 {
        let inst = random_instance(i, 20, None, &mut rng)?;
        for _ in 0..25 {
            let eta = DVector::from_fn(inst.prior.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let back = inst.prior.whiten(&inst.prior.sample_from(&eta)?)?;
            worst = worst.max((back - &eta).amax());
        }
    }
    Ok(CheckResult::new(
        "sampling / whitening round trip",
        worst,
        1e-8,
        format!("40 instances x 25 draws, max |η̂ − η| {worst:.2e}"),
    ))
}

/// Sample covariance of prior draws on a 10 + 10 instance with unit variances.
pub fn monte_carlo_covariance(samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |g: SpdMatrix| -> Result<SpdMatrix> {
        let d = g.matrix().diagonal().map(|v| 1.0 / v.sqrt());
        SpdMatrix::from_symmetrized(DMatrix::from_diagonal(&d) * g.matrix() * DMatrix::from_diagonal(&d))
    };
    let gp = unit(random_spd(10, &mut rng))?;
    let gm = unit(random_spd(10, &mut rng))?;
    let c = random_contraction(3, 10, 10, &mut rng)?;
    let prior = JointPrior::new(
        Arc::new(whitening_filter(&gp, FilterKind::Cholesky)?),
        Arc::new(whitening_filter(&gm, FilterKind::PrincipalSqrt)?),
        c,
        DVector::from_element(10, 1.0),
        DVector::from_element(10, -2.0),
    )?;
    let n = prior.dim();
    let mut sum = DVector::zeros(n);
    let mut outer = DMatrix::zeros(n, n);
    for _ in 0..samples {
        let s = prior.sample(&mut rng);
        outer.ger(1.0, &s, &s, 1.0);
        sum += &s;
    }
    let m = samples as f64;
    let mean = &sum / m;
    let cov = outer / m - &mean * mean.transpose();
    let worst = (cov - prior.covariance_dense()).amax();
    Ok(CheckResult::new(
        "Monte Carlo covariance of joint draws",
        worst,
        0.02,
        format!("{samples} draws, dimension {n}, max entrywise error {worst:.4}"),
    ))
}

/// `ln|Γ| = ln|Γ_p| + ln|Γ_m| + ln|I − CCᵀ|`, with the defect term computed
/// by the product or smaller-Gram shortcut, against dense LU determinants.
pub fn logdet_shortcuts(instances: usize, max_dim: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_split, mut worst_defect) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let inst = random_instance(i, max_dim, None, &mut rng)?;
        let p = &inst.prior;
        let ld_defect = p.contraction().ln_det_defect()?;
        let c = p.contraction().to_dense();
        let (n1, n2) = c.shape();
        let left = lu_logdet(&(DMatrix::identity(n1, n1) - &c * c.transpose()));
        let right = lu_logdet(&(DMatrix::identity(n2, n2) - c.transpose() * &c));
        worst_defect = worst_defect.max(rel(ld_defect, left)).max(rel(ld_defect, right));
        let split = p.filter_p().logdet_covariance()? + p.filter_m().logdet_covariance()? + ld_defect;
        worst_split = worst_split.max(rel(split, lu_logdet(&p.covariance_dense())));
    }
    let worst = worst_split.max(worst_defect);
    Ok(CheckResult::new(
        "log-determinant decomposition and shortcuts",
        worst,
        1e-8,
        format!("{instances} instances, joint split {worst_split:.2e}, defect term {worst_defect:.2e} (relative)"),
    ))
}

/// The scalar log-prior has a saddle at the origin.
pub fn saddle_at_origin() -> Result<CheckResult> {
    let (_, g, h) = scalar_prior_stationary(0.0, 0.0, 0.0)?;
    let ge = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let want = [[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut he = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            he = he.max((h[i][j] - want[i][j]).abs());
        }
    }
    let mut r = CheckResult::new(
        "saddle at the origin",
        he,
        1e-10,
        format!("|∇V(0)| {ge:.1e}, |H − diag(−1, −1, 1)| {he:.1e}"),
    );
    r.passed &= ge < 1e-12;
    Ok(r)
}

/// Analytic gradient of the scalar log-prior against central differences.
pub fn saddle_gradient_fd(points: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let x = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.random_range(-0.8..0.8),
        ];
        let (_, g, _) = scalar_prior_stationary(x[0], x[1], x[2])?;
        for k in 0..3 {
            let (mut a, mut b) = (x, x);
            a[k] += h;
            b[k] -= h;
            let fd = (scalar_prior_stationary(a[0], a[1], a[2])?.0 - scalar_prior_stationary(b[0], b[1], b[2])?.0) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs());
        }
    }
    Ok(CheckResult::new(
        "log-prior gradient vs finite differences",
        worst,
        1e-6,
        format!("{points} points, max error {worst:.2e}"),
    ))
}

/// Exact posterior covariance blocks for `c` and `−c` on the co-kriging layout.
pub fn sign_invariance(mesh: &MeshConfig) -> Result<CheckResult> {
    let cfg = CokrigeConfig {
        mesh: *mesh,
        ..CokrigeConfig::default()
    };
    let setup = CokrigeSetup::new(&cfg)?;
    let n = setup.n1();
    let c = cfg.true_correlation;
    let a = setup.fixed_posterior(c)?.covariance;
    let b = setup.fixed_posterior(-c)?.covariance;
    let ep = (a.view((0, 0), (n, n)) - b.view((0, 0), (n, n))).amax();
    let em = (a.view((n, n), (n, n)) - b.view((n, n), (n, n))).amax();
    let ex = (a.view((0, n), (n, n)) + b.view((0, n), (n, n))).amax();
    let worst = ep.max(em);
    Ok(CheckResult::new(
        "posterior marginal covariance invariant under c ↦ −c",
        worst,
        1e-9,
        format!("{n} nodes per field, c = ±{}: p block {ep:.1e}, m block {em:.1e}, cross block flips ({ex:.1e})", c.abs()),
    ))
}

/// `x_{t+1} = φ x_t + √(1 − φ²) ε_t`, started in stationarity.
pub fn ar1_chain(phi: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = (1.0 - phi * phi).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    (0..len)
        .map(|_| {
            let out = x;
            x = phi * x + scale * rng.sample::<f64, _>(StandardNormal);
            out
        })
        .collect()
}

/// ESS within 15 % of `M(1 − φ)/(1 + φ)`; i.i.d. ratio within `[0.9, 1.1]`.
pub fn ess_oracles(len: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = len as f64;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for phi in [0.5, 0.8, 0.95] {
        let oracle = m * (1.0 - phi) / (1.0 + phi);
        let got = ess(&ar1_chain(phi, len, &mut rng))?;
        worst = worst.max((got / oracle - 1.0).abs() / 0.15);
        parts.push(format!("φ={phi}: {got:.0} vs {oracle:.0}"));
    }
    let iid = ess(&ar1_chain(0.0, len, &mut rng))? / m;
    worst = worst.max((iid - 1.0).abs() / 0.1);
    parts.push(format!("iid ratio {iid:.3}"));
    Ok(CheckResult::new(
        "ESS against AR(1) oracles",
        worst,
        1.0,
        format!("M = {len}; {} (measured = worst error / tolerance)", parts.join(", ")),
    ))
}

/// Constant-coefficient Darcy solve at the unit-square centre against the Fourier series.
pub fn poisson_oracle() -> Result<CheckResult> {
    let n = 41;
    let mesh = build_lattice_mesh(n, n, 1.0, 1.0)?;
    let zero = DVector::zeros(n * n);
    let u = solve_darcy(&mesh, &zero, &zero)?;
    let centre = (n / 2) * n + n / 2;
    let oracle = poisson_unit_square_series(0.5, 0.5, 100);
    let err = (u[centre] - oracle).abs();
    Ok(CheckResult::new(
        "Darcy solve vs Poisson series",
        err,
        2e-3,
        format!("{n}x{n} mesh, u(½, ½) = {:.5}, series {oracle:.5}", u[centre]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_logdet_matches_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 0.5]));
        assert!((lu_logdet(&a) - 3.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn random_contractions_are_strict() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in 0..40 {
            let c = random_contraction(v, 7, if v % 4 == 1 { 7 } else { 4 }, &mut rng).unwrap();
            assert!(c.sigma_max() < 1.0);
        }
    }

    #[test]
    fn small_suite_passes() {
        let r = covariance_validity(12, 12, 3).unwrap();
        assert!(r.passed, "{}", r.detail);
        let r = logdet_shortcuts(12, 12, 4).unwrap();
        assert!(r.passed, "{}", r.detail);
        let r = saddle_at_origin().unwrap();
        assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn failing_check_is_reported() {
        let r = CheckResult::new("x", 2.0, 1.0, String::new());
        assert!(!r.passed);
    }
}
