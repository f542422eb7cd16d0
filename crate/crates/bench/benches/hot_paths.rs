use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jointnorm::experiments::{FieldPriorConfig, MeshConfig};
use jointnorm::linalg::cholesky;
use jointnorm::mesh_fem::DarcySolver;
use jointnorm::nalgebra::{DMatrix, DVector};
use jointnorm::{Contraction, JointPrior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spd(n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
    &a * a.transpose() + DMatrix::identity(n, n) * n as f64
}

fn bench_cholesky(c: &mut Criterion) {
    let mut g = c.benchmark_group("cholesky");
    for n in [50, 200, 338] {
        let a = spd(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| cholesky(black_box(a)).unwrap()));
    }
    g.finish();
}

fn bench_darcy(c: &mut Criterion) {
    let mut g = c.benchmark_group("darcy_solve");
    for (nx, ny) in [(26, 13), (50, 25)] {
        let mesh = MeshConfig::new(nx, ny, 2.0, 1.0).build().unwrap();
        let solver = DarcySolver::new(&mesh).unwrap();
        let n = mesh.num_nodes();
        let p = DVector::from_fn(n, |i, _| (i as f64 * 0.1).sin());
        let m = DVector::from_element(n, 1.0);
        g.bench_function(format!("{nx}x{ny}"), |b| b.iter(|| solver.solve(black_box(&p), black_box(&m)).unwrap()));
    }
    g.finish();
}

fn joint_prior() -> JointPrior {
    let mesh = MeshConfig::new(26, 13, 2.0, 1.0).build().unwrap();
    let priors = FieldPriorConfig::default().build(&mesh).unwrap();
    let n = mesh.num_nodes();
    JointPrior::centred(
        Arc::clone(&priors.filter_p),
        Arc::clone(&priors.filter_m),
        Contraction::scalar(-0.9, n, n).unwrap(),
    )
    .unwrap()
}

fn bench_joint(c: &mut Criterion) {
    let prior = joint_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = prior.sample(&mut rng);
    c.bench_function("joint_sample_338", |b| b.iter(|| prior.sample(&mut rng)));
    c.bench_function("joint_log_density_338", |b| {
        b.iter(|| prior.log_density(black_box(&s), true).unwrap())
    });
}

criterion_group!(benches, bench_cholesky, bench_darcy, bench_joint);
criterion_main!(benches);
