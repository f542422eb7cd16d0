//! Triangulated lattice meshes, linear Lagrange finite elements and the Darcy
//! forward solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// A 2×2 conductivity/anisotropy tensor.
pub type Tensor2 = [[f64; 2]; 2];

pub const IDENTITY_TENSOR: Tensor2 = [[1.0, 0.0], [0.0, 1.0]];

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<[usize; 2]>,
    boundary_nodes: Vec<usize>,
    is_boundary: Vec<bool>,
    lattice: Option<(usize, usize)>,
    bbox: [Point; 2],
}

impl Mesh {
    /// Builds a mesh from explicit nodes, triangles and boundary edges.
    pub fn new(nodes: Vec<Point>, triangles: Vec<[usize; 3]>, boundary_edges: Vec<[usize; 2]>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::InvalidArgument("mesh has no nodes".into()));
        }
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::InvalidArgument(format!("triangle {t} references a missing node")));
            }
        }
        if boundary_edges.iter().flatten().any(|&v| v >= n) {
            return Err(Error::InvalidArgument("boundary edge references a missing node".into()));
        }
        let mut is_boundary = vec![false; n];
        for e in &boundary_edges {
            is_boundary[e[0]] = true;
            is_boundary[e[1]] = true;
        }
        let boundary_nodes = (0..n).filter(|&i| is_boundary[i]).collect();
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for x in &nodes {
            for d in 0..2 {
                lo[d] = lo[d].min(x[d]);
                hi[d] = hi[d].max(x[d]);
            }
        }
        let mesh = Self {
            nodes,
            triangles,
            boundary_edges,
            boundary_nodes,
            is_boundary,
            lattice: None,
            bbox: [lo, hi],
        };
        for t in 0..mesh.triangles.len() {
            mesh.element(t)?;
        }
        Ok(mesh)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.is_boundary[node]
    }

    /// `(nx, ny)` for lattice meshes.
    pub fn lattice_dims(&self) -> Option<(usize, usize)> {
        self.lattice
    }

    pub fn bounding_box(&self) -> [Point; 2] {
        self.bbox
    }

    /// Nodes with `y` equal to the lower edge of the bounding box, ordered by `x`.
    pub fn bottom_nodes(&self) -> Vec<usize> {
        let y0 = self.bbox[0][1];
        let tol = 1e-12 * (1.0 + y0.abs());
        let mut idx: Vec<usize> = (0..self.num_nodes())
            .filter(|&i| (self.nodes[i][1] - y0).abs() <= tol)
            .collect();
        idx.sort_by(|&a, &b| self.nodes[a][0].total_cmp(&self.nodes[b][0]));
        idx
    }

    /// Area and basis-function gradients of triangle `t`.
    pub fn element(&self, t: usize) -> Result<Element> {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        let area = 0.5 * det.abs();
        let diam2 = [(pa, pb), (pb, pc), (pc, pa)]
            .iter()
            .map(|(u, v)| (u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2))
            .fold(0.0, f64::max);
        if !(area > 1e-12 * diam2) {
            return Err(Error::DegenerateTriangle { index: t, area });
        }
        let pts = [pa, pb, pc];
        let mut grads = [[0.0; 2]; 3];
        for (i, g) in grads.iter_mut().enumerate() {
            let pj = pts[(i + 1) % 3];
            let pk = pts[(i + 2) % 3];
            *g = [(pj[1] - pk[1]) / det, (pk[0] - pj[0]) / det];
        }
        Ok(Element { area, grads })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Element {
    pub area: f64,
    pub grads: [[f64; 2]; 3],
}

impl Element {
    /// Local stiffness `A (Θ∇φ_i)·∇φ_j`.
    pub fn stiffness(&self, theta: &Tensor2) -> [[f64; 3]; 3] {
        let mut k = [[0.0; 3]; 3];
        for i in 0..3 {
            let gi = self.grads[i];
            let tg = [
                theta[0][0] * gi[0] + theta[0][1] * gi[1],
                theta[1][0] * gi[0] + theta[1][1] * gi[1],
            ];
            for j in 0..3 {
                let gj = self.grads[j];
                k[i][j] = self.area * (tg[0] * gj[0] + tg[1] * gj[1]);
            }
        }
        k
    }
}

/// Regular `nx × ny` lattice on `[0, lx] × [0, ly]`.
///
/// Node `(i, j)` has index `j * nx + i`. Each cell is split along its
/// lower-left to upper-right diagonal.
pub fn build_lattice_mesh(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Mesh> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidArgument(format!("lattice needs nx, ny >= 2 (got {nx}, {ny})")));
    }
    if !(lx > 0.0 && ly > 0.0) {
        return Err(Error::InvalidArgument(format!("lattice extents must be positive (got {lx}, {ly})")));
    }
    let hx = lx / (nx - 1) as f64;
    let hy = ly / (ny - 1) as f64;
    let mut nodes = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            nodes.push([i as f64 * hx, j as f64 * hy]);
        }
    }
    let id = |i: usize, j: usize| j * nx + i;
    let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    let mut edges = Vec::with_capacity(2 * (nx + ny - 2));
    for i in 0..nx - 1 {
        edges.push([id(i, 0), id(i + 1, 0)]);
    }
    for j in 0..ny - 1 {
        edges.push([id(nx - 1, j), id(nx - 1, j + 1)]);
    }
    for i in (0..nx - 1).rev() {
        edges.push([id(i + 1, ny - 1), id(i, ny - 1)]);
    }
    for j in (0..ny - 1).rev() {
        edges.push([id(0, j + 1), id(0, j)]);
    }
    let mut mesh = Mesh::new(nodes, triangles, edges)?;
    mesh.lattice = Some((nx, ny));
    Ok(mesh)
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles from `(row, col, value)` triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows, |r, _| self.row(r).map(|(c, v)| v * x[c]).sum())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                out[(r, c)] += v;
            }
        }
        out
    }
}

/// Stiffness, mass and boundary-mass matrices.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    pub k: CsrMatrix,
    pub m: CsrMatrix,
    pub b: CsrMatrix,
}

impl FemMatrices {
    /// Dense `a1 K + a2 M + a3 B`.
    pub fn combine_dense(&self, a1: f64, a2: f64, a3: f64) -> DMatrix<f64> {
        self.k.to_dense() * a1 + self.m.to_dense() * a2 + self.b.to_dense() * a3
    }
}

/// Linear Lagrange assembly with exact element integrals. `coeff`, when given,
/// scales the stiffness contribution of each triangle.
pub fn assemble_fem_matrices(mesh: &Mesh, theta: &Tensor2, coeff: Option<&[f64]>) -> Result<FemMatrices> {
    let n = mesh.num_nodes();
    let nt = mesh.num_triangles();
    if let Some(c) = coeff {
        if c.len() != nt {
            return Err(Error::shape("element coefficients", nt, c.len()));
        }
    }
    let mut kt = Vec::with_capacity(9 * nt);
    let mut mt = Vec::with_capacity(9 * nt);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let el = mesh.element(t)?;
        let scale = coeff.map_or(1.0, |c| c[t]);
        let ke = el.stiffness(theta);
        for i in 0..3 {
            for j in 0..3 {
                kt.push((tri[i], tri[j], scale * ke[i][j]));
                let me = if i == j { el.area / 6.0 } else { el.area / 12.0 };
                mt.push((tri[i], tri[j], me));
            }
        }
    }
    let mut bt = Vec::with_capacity(4 * mesh.boundary_edges().len());
    for &[a, b] in mesh.boundary_edges() {
        let (pa, pb) = (mesh.nodes()[a], mesh.nodes()[b]);
        let h = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        bt.push((a, a, h / 3.0));
        bt.push((b, b, h / 3.0));
        bt.push((a, b, h / 6.0));
        bt.push((b, a, h / 6.0));
    }
    Ok(FemMatrices {
        k: CsrMatrix::from_triplets(n, n, kt),
        m: CsrMatrix::from_triplets(n, n, mt),
        b: CsrMatrix::from_triplets(n, n, bt),
    })
}

/// Symmetric banded matrix stored by lower diagonals, `band[i][k] = A[i, i-k]`.
#[derive(Debug, Clone)]
struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j && i - j <= self.bw);
        self.data[i * (self.bw + 1) + (i - j)] += v;
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[i * (self.bw + 1) + (i - j)]
        }
    }

    fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let v = self.data[i * (self.bw + 1) + (i - j)];
                y[i] += v * x[j];
                if j != i {
                    y[j] += v * x[i];
                }
            }
        }
        y
    }

    /// In-place banded Cholesky; afterwards the storage holds the lower factor.
    fn factorize(&mut self) -> Result<()> {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..=i {
                let jlo = lo.max(j.saturating_sub(self.bw));
                let mut s = self.data[i * w + (i - j)];
                for k in jlo..j {
                    s -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                    }
                    self.data[i * w] = s.sqrt();
                } else {
                    self.data[i * w + (i - j)] = s / self.data[j * w];
                }
            }
        }
        Ok(())
    }

    fn solve_factored(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut s = b[i];
            for k in lo..i {
                s -= self.data[i * w + (i - k)] * b[k];
            }
            b[i] = s / self.data[i * w];
        }
        for i in (0..self.n).rev() {
            let hi = (i + self.bw).min(self.n - 1);
            let mut s = b[i];
            for k in i + 1..=hi {
                s -= self.data[k * w + (k - i)] * b[k];
            }
            b[i] = s / self.data[i * w];
        }
    }
}

/// Galerkin solver for `-∇·(exp(p)∇u) = exp(m)` with `u = 0` on the boundary.
///
/// Element geometry and the mass matrix are cached, so repeated solves on the
/// same mesh only re-assemble the stiffness.
#[derive(Debug, Clone)]
pub struct DarcySolver {
    mesh: Mesh,
    local_stiffness: Vec<[[f64; 3]; 3]>,
    mass: CsrMatrix,
    interior: Vec<usize>,
    /// Node index to interior index.
    position: Vec<Option<usize>>,
    bandwidth: usize,
}

impl DarcySolver {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let n = mesh.num_nodes();
        let mut local_stiffness = Vec::with_capacity(mesh.num_triangles());
        for t in 0..mesh.num_triangles() {
            local_stiffness.push(mesh.element(t)?.stiffness(&IDENTITY_TENSOR));
        }
        let fem = assemble_fem_matrices(mesh, &IDENTITY_TENSOR, None)?;
        let interior: Vec<usize> = (0..n).filter(|&i| !mesh.is_boundary(i)).collect();
        if interior.is_empty() {
            return Err(Error::InvalidArgument("mesh has no interior nodes".into()));
        }
        let mut position = vec![None; n];
        for (k, &i) in interior.iter().enumerate() {
            position[i] = Some(k);
        }
        let mut bandwidth = 0;
        for tri in mesh.triangles() {
            let pos: Vec<usize> = tri.iter().filter_map(|&v| position[v]).collect();
            for &a in &pos {
                for &b in &pos {
                    bandwidth = bandwidth.max(a.abs_diff(b));
                }
            }
        }
        Ok(Self {
            mesh: mesh.clone(),
            local_stiffness,
            mass: fem.m,
            interior,
            position,
            bandwidth,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    /// Per-element permeability `exp(mean of the vertex values of p)`.
    pub fn element_permeability(&self, p: &DVector<f64>) -> Vec<f64> {
        self.mesh
            .triangles()
            .iter()
            .map(|t| ((p[t[0]] + p[t[1]] + p[t[2]]) / 3.0).exp())
            .collect()
    }

    fn check_len(&self, v: &DVector<f64>, what: &'static str) -> Result<()> {
        if v.len() != self.mesh.num_nodes() {
            return Err(Error::shape(what, self.mesh.num_nodes(), v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    fn reduced_system(&self, p: &DVector<f64>, m: &DVector<f64>) -> (BandMatrix, Vec<f64>) {
        let kappa = self.element_permeability(p);
        let mut a = BandMatrix::zeros(self.interior.len(), self.bandwidth);
        for (t, tri) in self.mesh.triangles().iter().enumerate() {
            let ke = &self.local_stiffness[t];
            for i in 0..3 {
                let Some(pi) = self.position[tri[i]] else { continue };
                for j in 0..3 {
                    let Some(pj) = self.position[tri[j]] else { continue };
                    if pi >= pj {
                        a.add(pi, pj, kappa[t] * ke[i][j]);
                    }
                }
            }
        }
        let load = self.mass.mul_vec(&m.map(f64::exp));
        let rhs = self.interior.iter().map(|&i| load[i]).collect();
        (a, rhs)
    }

    /// Dense reduced (interior) system matrix and right-hand side.
    pub fn reduced_system_dense(&self, p: &DVector<f64>, m: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        self.check_len(p, "darcy log-permeability")?;
        self.check_len(m, "darcy log-recharge")?;
        let (a, rhs) = self.reduced_system(p, m);
        let n = a.n;
        Ok((DMatrix::from_fn(n, n, |i, j| a.get(i, j)), DVector::from_vec(rhs)))
    }

    pub fn solve(&self, p: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(p, "darcy log-permeability")?;
        self.check_len(m, "darcy log-recharge")?;
        let (mut a, mut x) = self.reduced_system(p, m);
        a.factorize()?;
        a.solve_factored(&mut x);
        let mut u = DVector::zeros(self.mesh.num_nodes());
        for (k, &i) in self.interior.iter().enumerate() {
            u[i] = x[k];
        }
        Ok(u)
    }

    /// Relative residual `‖A x − b‖ / ‖b‖` of the reduced system at solution `u`.
    pub fn relative_residual(&self, p: &DVector<f64>, m: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (a, rhs) = self.reduced_system(p, m);
        let x: Vec<f64> = self.interior.iter().map(|&i| u[i]).collect();
        let ax = a.mul_vec(&x);
        let num: f64 = ax.iter().zip(&rhs).map(|(l, r)| (l - r).powi(2)).sum();
        let den: f64 = rhs.iter().map(|r| r * r).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

/// One-shot Darcy solve.
pub fn solve_darcy(mesh: &Mesh, p: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
    DarcySolver::new(mesh)?.solve(p, m)
}

/// Pointwise observation by nearest-node selection.
#[derive(Debug, Clone)]
pub struct PointObservation {
    n_nodes: usize,
    indices: Vec<usize>,
    requested: Vec<Point>,
    snapped: Vec<Point>,
}

impl PointObservation {
    pub fn from_indices(n_nodes: usize, indices: Vec<usize>, nodes: &[Point]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_nodes) {
            return Err(Error::shape("observation index", format!("< {n_nodes}"), bad));
        }
        let snapped: Vec<Point> = indices.iter().map(|&i| nodes[i]).collect();
        Ok(Self {
            n_nodes,
            requested: snapped.clone(),
            snapped,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn requested(&self) -> &[Point] {
        &self.requested
    }

    pub fn snapped(&self) -> &[Point] {
        &self.snapped
    }

    pub fn apply(&self, field: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.indices.iter().map(|&i| field[i]))
    }

    /// Selection matrix with one unit entry per row.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.len(), self.n_nodes);
        for (r, &i) in self.indices.iter().enumerate() {
            b[(r, i)] = 1.0;
        }
        b
    }
}

pub fn point_observation_operator(mesh: &Mesh, locations: &[Point]) -> Result<PointObservation> {
    let [lo, hi] = mesh.bounding_box();
    let tol = 1e-12 * (1.0 + (hi[0] - lo[0]).abs() + (hi[1] - lo[1]).abs());
    let mut indices = Vec::with_capacity(locations.len());
    let mut snapped = Vec::with_capacity(locations.len());
    for &x in locations {
        if !(x[0] >= lo[0] - tol && x[0] <= hi[0] + tol && x[1] >= lo[1] - tol && x[1] <= hi[1] + tol) {
            return Err(Error::OutsideDomain { x: x[0], y: x[1] });
        }
        let mut best = (f64::INFINITY, 0);
        for (i, node) in mesh.nodes().iter().enumerate() {
            let d = (node[0] - x[0]).powi(2) + (node[1] - x[1]).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        indices.push(best.1);
        snapped.push(mesh.nodes()[best.1]);
    }
    Ok(PointObservation {
        n_nodes: mesh.num_nodes(),
        indices,
        requested: locations.to_vec(),
        snapped,
    })
}

/// Fourier-series value of the solution to `-Δu = 1` on the unit square with
/// zero boundary values, using odd modes below `2 * terms`.
pub fn poisson_unit_square_series(x: f64, y: f64, terms: usize) -> f64 {
    use std::f64::consts::PI;
    let mut s = 0.0;
    for a in (1..2 * terms).step_by(2) {
        for b in (1..2 * terms).step_by(2) {
            let (a, b) = (a as f64, b as f64);
            s += 16.0 / (PI.powi(4) * a * b * (a * a + b * b)) * (a * PI * x).sin() * (b * PI * y).sin();
        }
    }
    s
}
