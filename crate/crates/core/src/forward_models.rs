//! Parameter-to-observable maps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::covariance::KLBasis;
use crate::error::{Error, Result};
use crate::joint_prior::{split, stack};
use crate::mesh_fem::{DarcySolver, PointObservation};

/// A map from the stacked state `s = (p, m)` to predicted observations.
pub trait ForwardModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, s: &DVector<f64>) -> Result<DVector<f64>>;

    /// The matrix `G` when the model is linear, `G(s) = G s`.
    fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        None
    }
}

fn check_input(model: &dyn ForwardModel, s: &DVector<f64>) -> Result<()> {
    if s.len() != model.input_dim() {
        return Err(Error::shape("forward model input", model.input_dim(), s.len()));
    }
    Ok(())
}

/// `μ_i = p S_i / (m + S_i)`
pub fn monod_forward(p: f64, m: f64, substrate: &[f64]) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(substrate.len());
    for (i, &s) in substrate.iter().enumerate() {
        let den = m + s;
        if den.abs() < 1e-12 {
            return Err(Error::NearZeroDenominator { index: i });
        }
        out[i] = p * s / den;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MonodModel {
    substrate: Vec<f64>,
}

impl MonodModel {
    pub fn new(substrate: Vec<f64>) -> Self {
        Self { substrate }
    }

    pub fn substrate(&self) -> &[f64] {
        &self.substrate
    }

    /// Analytic Jacobian in `(p, m)`.
    pub fn jacobian(&self, p: f64, m: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.substrate.len(), 2, |i, j| {
            let s = self.substrate[i];
            if j == 0 {
                s / (m + s)
            } else {
                -p * s / (m + s).powi(2)
            }
        })
    }
}

impl ForwardModel for MonodModel {
    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        self.substrate.len()
    }

    fn evaluate(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self, s)?;
        monod_forward(s[0], s[1], &self.substrate)
    }
}

/// `G(s) = G s` for an explicit matrix; zero rows give a prior-only problem.
#[derive(Debug, Clone)]
pub struct LinearModel {
    g: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(g: DMatrix<f64>) -> Self {
        Self { g }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }
}

impl ForwardModel for LinearModel {
    fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    fn output_dim(&self) -> usize {
        self.g.nrows()
    }

    fn evaluate(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self, s)?;
        Ok(&self.g * s)
    }

    fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        Some(self.g.clone())
    }
}

/// Pointwise observation of both fields, `d = (B₁ p, B₂ m)`.
#[derive(Debug, Clone)]
pub struct CokrigeModel {
    obs_p: PointObservation,
    obs_m: PointObservation,
}

impl CokrigeModel {
    pub fn new(obs_p: PointObservation, obs_m: PointObservation) -> Self {
        Self { obs_p, obs_m }
    }

    pub fn obs_p(&self) -> &PointObservation {
        &self.obs_p
    }

    pub fn obs_m(&self) -> &PointObservation {
        &self.obs_m
    }
}

impl ForwardModel for CokrigeModel {
    fn input_dim(&self) -> usize {
        self.obs_p.n_nodes() + self.obs_m.n_nodes()
    }

    fn output_dim(&self) -> usize {
        self.obs_p.len() + self.obs_m.len()
    }

    fn evaluate(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self, s)?;
        let (p, m) = split(s, self.obs_p.n_nodes());
        Ok(stack(&self.obs_p.apply(&p), &self.obs_m.apply(&m)))
    }

    fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        let (q1, q2) = (self.obs_p.len(), self.obs_m.len());
        let (n1, n2) = (self.obs_p.n_nodes(), self.obs_m.n_nodes());
        let mut g = DMatrix::zeros(q1 + q2, n1 + n2);
        g.view_mut((0, 0), (q1, n1)).copy_from(&self.obs_p.to_dense());
        g.view_mut((q1, n1), (q2, n2)).copy_from(&self.obs_m.to_dense());
        Some(g)
    }
}

/// Head observations of the Darcy solution and direct observations of the
/// log-permeability, `d = (B₁ u(p, m), B₂ p)`.
#[derive(Debug, Clone)]
pub struct DarcyModel {
    solver: DarcySolver,
    obs_u: PointObservation,
    obs_p: PointObservation,
}

impl DarcyModel {
    pub fn new(solver: DarcySolver, obs_u: PointObservation, obs_p: PointObservation) -> Result<Self> {
        let n = solver.mesh().num_nodes();
        if obs_u.n_nodes() != n || obs_p.n_nodes() != n {
            return Err(Error::shape("darcy observation operators", n, obs_u.n_nodes().max(obs_p.n_nodes())));
        }
        Ok(Self { solver, obs_u, obs_p })
    }

    pub fn solver(&self) -> &DarcySolver {
        &self.solver
    }

    pub fn obs_u(&self) -> &PointObservation {
        &self.obs_u
    }

    pub fn obs_p(&self) -> &PointObservation {
        &self.obs_p
    }

    pub fn head(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self, s)?;
        let (p, m) = split(s, self.solver.mesh().num_nodes());
        self.solver.solve(&p, &m)
    }
}

impl ForwardModel for DarcyModel {
    fn input_dim(&self) -> usize {
        2 * self.solver.mesh().num_nodes()
    }

    fn output_dim(&self) -> usize {
        self.obs_u.len() + self.obs_p.len()
    }

    fn evaluate(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self, s)?;
        let (p, m) = split(s, self.solver.mesh().num_nodes());
        let u = self.solver.solve(&p, &m)?;
        Ok(stack(&self.obs_u.apply(&u), &self.obs_p.apply(&p)))
    }
}

/// A model evaluated on truncated KL coordinates `ŝ = (p̂, m̂)`.
#[derive(Clone)]
pub struct ReducedModel {
    inner: Arc<dyn ForwardModel>,
    synth_p: DMatrix<f64>,
    synth_m: DMatrix<f64>,
    mean_p: DVector<f64>,
    mean_m: DVector<f64>,
}

impl ReducedModel {
    pub fn new(
        inner: Arc<dyn ForwardModel>,
        basis_p: &KLBasis,
        basis_m: &KLBasis,
        mean_p: DVector<f64>,
        mean_m: DVector<f64>,
    ) -> Result<Self> {
        let (n1, n2) = (basis_p.dim(), basis_m.dim());
        if n1 + n2 != inner.input_dim() || mean_p.len() != n1 || mean_m.len() != n2 {
            return Err(Error::shape("reduced model", inner.input_dim(), n1 + n2));
        }
        Ok(Self {
            inner,
            synth_p: basis_p.synthesis_matrix(),
            synth_m: basis_m.synthesis_matrix(),
            mean_p,
            mean_m,
        })
    }

    pub fn kp(&self) -> usize {
        self.synth_p.ncols()
    }

    pub fn km(&self) -> usize {
        self.synth_m.ncols()
    }

    /// Full fields `(p* + V̂Λ̂^{1/2} p̂, m* + ÛΣ̂^{1/2} m̂)`.
    pub fn lift(&self, shat: &DVector<f64>) -> DVector<f64> {
        let (ph, mh) = split(shat, self.kp());
        stack(&(&self.synth_p * ph + &self.mean_p), &(&self.synth_m * mh + &self.mean_m))
    }

    /// Dense block-diagonal synthesis operator.
    pub fn synthesis_dense(&self) -> DMatrix<f64> {
        let (n1, n2) = (self.synth_p.nrows(), self.synth_m.nrows());
        let (kp, km) = (self.kp(), self.km());
        let mut s = DMatrix::zeros(n1 + n2, kp + km);
        s.view_mut((0, 0), (n1, kp)).copy_from(&self.synth_p);
        s.view_mut((n1, kp), (n2, km)).copy_from(&self.synth_m);
        s
    }
}

impl ForwardModel for ReducedModel {
    fn input_dim(&self) -> usize {
        self.kp() + self.km()
    }

    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn evaluate(&self, shat: &DVector<f64>) -> Result<DVector<f64>> {
        check_input(self, shat)?;
        self.inner.evaluate(&self.lift(shat))
    }

    fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        self.inner.linear_matrix().map(|g| g * self.synthesis_dense())
    }
}

pub const DEFAULT_H_REL: f64 = 1e-5;

/// Central-difference Jacobian with steps `h_rel (1 + |s_i|)`.
pub fn fd_jacobian(model: &dyn ForwardModel, s0: &DVector<f64>, h_rel: f64) -> Result<DMatrix<f64>> {
    check_input(model, s0)?;
    if !(h_rel > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive (got {h_rel})")));
    }
    let mut j = DMatrix::zeros(model.output_dim(), s0.len());
    let wrap = |coordinate: usize| move |e: Error| Error::ForwardFailure {
        coordinate,
        source: Box::new(e),
    };
    for i in 0..s0.len() {
        let h = h_rel * (1.0 + s0[i].abs());
        let mut plus = s0.clone();
        plus[i] += h;
        let mut minus = s0.clone();
        minus[i] -= h;
        let fp = model.evaluate(&plus).map_err(wrap(i))?;
        let fm = model.evaluate(&minus).map_err(wrap(i))?;
        j.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::{build_lattice_mesh, point_observation_operator, poisson_unit_square_series};

    const SUBSTRATE: [f64; 7] = [28.0, 55.0, 83.0, 110.0, 138.0, 225.0, 375.0];

    #[test]
    fn monod_values() {
        let s = SUBSTRATE.to_vec();
        assert!(monod_forward(0.7, 0.0, &s).unwrap().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!((monod_forward(0.7, 65.0, &s).unwrap()[0] - 19.6 / 93.0).abs() < 1e-12);
        assert!((monod_forward(0.7, 65.0, &s).unwrap()[0] - 0.210753).abs() < 1e-6);
        assert!(monod_forward(0.0, 65.0, &s).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(monod_forward(1.0, -28.0, &s), Err(Error::NearZeroDenominator { index: 0 })));
    }

    #[test]
    fn monod_jacobian() {
        let model = MonodModel::new(SUBSTRATE.to_vec());
        let s0 = DVector::from_vec(vec![0.7, 65.0]);
        let j = fd_jacobian(&model, &s0, DEFAULT_H_REL).unwrap();
        assert!((j[(0, 0)] - 28.0 / 93.0).abs() < 1e-9);
        let exact = model.jacobian(0.7, 65.0);
        let err = |h: f64| (fd_jacobian(&model, &s0, h).unwrap() - &exact).amax();
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        for p in [0.2, 0.7, 1.5] {
            for m in [-20.0, 10.0, 65.0, 200.0] {
                let s = DVector::from_vec(vec![p, m]);
                let d = (fd_jacobian(&model, &s, DEFAULT_H_REL).unwrap() - model.jacobian(p, m)).amax();
                assert!(d < 1e-6);
            }
        }
    }

    #[test]
    fn cokrige_model_is_linear_selection() {
        let mesh = build_lattice_mesh(5, 4, 2.0, 1.0).unwrap();
        let bp = point_observation_operator(&mesh, &[[1.5, 0.0], [2.0, 1.0]]).unwrap();
        let bm = point_observation_operator(&mesh, &[[0.0, 1.0]]).unwrap();
        let model = CokrigeModel::new(bp, bm);
        assert_eq!(model.evaluate(&DVector::zeros(40)).unwrap(), DVector::zeros(3));
        assert_eq!(model.evaluate(&DVector::from_element(40, 1.0)).unwrap(), DVector::from_element(3, 1.0));
        let s = DVector::from_fn(40, |i, _| (i as f64).sqrt());
        let g = model.linear_matrix().unwrap();
        assert_eq!(model.evaluate(&(&s * 2.5)).unwrap(), model.evaluate(&s).unwrap() * 2.5);
        assert!((fd_jacobian(&model, &s, DEFAULT_H_REL).unwrap() - &g).amax() < 1e-9);
        assert_eq!(g.view((2, 0), (1, 20)).amax(), 0.0);
    }

    #[test]
    fn darcy_model_blocks() {
        let mesh = build_lattice_mesh(21, 21, 1.0, 1.0).unwrap();
        let solver = DarcySolver::new(&mesh).unwrap();
        let locs = [[0.5, 0.5], [0.25, 0.5], [0.75, 0.25]];
        let bu = point_observation_operator(&mesh, &locs).unwrap();
        let bp = point_observation_operator(&mesh, &[[0.1, 0.9], [0.6, 0.4]]).unwrap();
        let model = DarcyModel::new(solver, bu.clone(), bp.clone()).unwrap();
        let n = mesh.num_nodes();
        let d = model.evaluate(&DVector::zeros(2 * n)).unwrap();
        for (k, x) in bu.snapped().iter().enumerate() {
            assert!((d[k] - poisson_unit_square_series(x[0], x[1], 100)).abs() < 2e-3);
        }
        let s = DVector::from_fn(2 * n, |i, _| 0.3 * ((i % 17) as f64).sin());
        let d0 = model.evaluate(&s).unwrap();
        let (p, _) = split(&s, n);
        assert_eq!(d0.rows(3, 2).into_owned(), bp.apply(&p));
        let d1 = model.evaluate(&s.add_scalar(0.7)).unwrap();
        assert!((d1.rows(0, 3) - d0.rows(0, 3)).amax() < 1e-10);
        assert!((d1.rows(3, 2) - d0.rows(3, 2).add_scalar(0.7)).amax() < 1e-12);
        let j = fd_jacobian(&model, &s, DEFAULT_H_REL).unwrap();
        assert_eq!(j.view((3, n), (2, n)).amax(), 0.0);
    }

    #[test]
    fn forward_failure_names_coordinate() {
        let model = MonodModel::new(vec![1.0]);
        let s0 = DVector::from_vec(vec![1.0, -1.0 + 1e-13]);
        match fd_jacobian(&model, &s0, 1e-14) {
            Err(Error::ForwardFailure { coordinate, .. }) => assert_eq!(coordinate, 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
