use std::sync::Arc;

use jointnorm::covariance::{fem_precision_filter, sqexp_covariance, whitening_filter, KernelConfig, PdePriorConfig};
use jointnorm::experiments::MeshConfig;
use jointnorm::joint_prior::split;
use jointnorm::nalgebra::DVector;
use jointnorm::{Contraction, Error, ErrorCategory, FilterKind, JointPrior};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn field_prior(c: f64) -> JointPrior {
    let mesh = MeshConfig::new(8, 4, 2.0, 1.0).build().unwrap();
    let gp = sqexp_covariance(mesh.nodes(), &KernelConfig::new(0.3)).unwrap();
    let fp = Arc::new(whitening_filter(&gp, FilterKind::PrincipalSqrt).unwrap());
    let fm = Arc::new(fem_precision_filter(&mesh, &PdePriorConfig::isotropic(1.5, 30.0, 7.5)).unwrap());
    let n = mesh.num_nodes();
    JointPrior::new(
        fp,
        fm,
        Contraction::scalar(c, n, n).unwrap(),
        DVector::from_element(n, 1.0),
        DVector::from_element(n, -2.0),
    )
    .unwrap()
}

#[test]
fn mesh_prior_sample_whiten_round_trip() {
    let prior = field_prior(-0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eta = DVector::from_fn(prior.dim(), |i, _| ((i * 37 % 11) as f64 - 5.0) / 4.0);
    let s = prior.sample_from(&eta).unwrap();
    assert!((prior.whiten(&s).unwrap() - &eta).amax() < 1e-9);
    let (p, m) = split(&prior.sample(&mut rng), prior.n1());
    assert_eq!(p.len(), 32);
    assert_eq!(m.len(), 32);
}

#[test]
fn joint_covariance_keeps_marginals_of_fem_prior() {
    let prior = field_prior(0.95);
    let g = prior.covariance_dense();
    let n = prior.n1();
    let gm = prior.filter_m().covariance_dense();
    assert!((g.view((n, n), (n, n)) - &gm).amax() < 1e-10 * gm.amax());
}

#[test]
fn inadmissible_correlation_is_a_model_error() {
    let e = Contraction::scalar(1.0, 2, 2).unwrap_err();
    assert!(matches!(e, Error::NotStrictContraction { .. }));
    assert_eq!(e.category(), ErrorCategory::Model);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_density_is_maximal_at_the_mean(c in -0.95f64..0.95, shift in 0.01f64..2.0) {
        let prior = field_prior(c);
        let mean = DVector::from_fn(prior.dim(), |i, _| if i < prior.n1() { 1.0 } else { -2.0 });
        let at_mean = prior.log_density(&mean, true).unwrap();
        let off = prior.log_density(&mean.add_scalar(shift), true).unwrap();
        prop_assert!(off < at_mean);
    }
}
