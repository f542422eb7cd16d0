//! Chain statistics and the accuracy / uncertainty metrics.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn centred(x: &[f64]) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok((c, var))
}

/// Biased sample autocorrelation `r(0..=max_lag)`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    if x.len() <= max_lag {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} too short for lag {max_lag}",
            x.len()
        )));
    }
    let (c, var) = centred(x)?;
    let n = x.len() as f64;
    Ok((0..=max_lag)
        .map(|w| match w {
            0 => 1.0,
            _ => c[..c.len() - w].iter().zip(&c[w..]).map(|(a, b)| a * b).sum::<f64>() / (n * var),
        })
        .collect())
}

/// `M / (1 + 2 Σ_{w≥1} r(w))`, summing until the first negative `r(w)`.
pub fn ess(x: &[f64]) -> Result<f64> {
    let (c, var) = centred(x)?;
    let m = c.len();
    let n = m as f64;
    let mut sum = 0.0;
    for w in 1..m {
        let r = c[..m - w].iter().zip(&c[w..]).map(|(a, b)| a * b).sum::<f64>() / (n * var);
        if r < 0.0 {
            break;
        }
        sum += r;
    }
    Ok(n / (1.0 + 2.0 * sum))
}

pub fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

/// Fraction of entries satisfying `pred`.
pub fn mass_where(x: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    x.iter().filter(|&&v| pred(v)).count() as f64 / x.len().max(1) as f64
}

/// `‖truth − estimate‖ / ‖truth‖`
pub fn relative_error(truth: &DVector<f64>, estimate: &DVector<f64>) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::shape("relative error", truth.len(), estimate.len()));
    }
    let norm = truth.norm();
    if norm == 0.0 {
        return Err(Error::ZeroNormTruth);
    }
    Ok((truth - estimate).norm() / norm)
}

/// `tr Γ_post / tr Γ_prior` from the diagonals.
pub fn uncertainty_ratio(posterior_var: &DVector<f64>, prior_var: &DVector<f64>) -> Result<f64> {
    if posterior_var.len() != prior_var.len() {
        return Err(Error::shape("uncertainty ratio", prior_var.len(), posterior_var.len()));
    }
    let tr = prior_var.sum();
    if !(tr > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(posterior_var.sum() / tr)
}

/// Pointwise `std_independent − std_joint`.
pub fn std_difference(independent_var: &DVector<f64>, joint_var: &DVector<f64>) -> Result<DVector<f64>> {
    if independent_var.len() != joint_var.len() {
        return Err(Error::shape("std difference", independent_var.len(), joint_var.len()));
    }
    Ok(independent_var.map(|v| v.max(0.0).sqrt()) - joint_var.map(|v| v.max(0.0).sqrt()))
}

/// Posterior summary of one field: conditional mean and pointwise variance.
#[derive(Debug, Clone)]
pub struct FieldSummary {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldMetrics {
    pub e_p: f64,
    pub e_m: f64,
    pub u_p: f64,
    pub u_m: f64,
}

pub fn field_metrics(
    truth_p: &DVector<f64>,
    truth_m: &DVector<f64>,
    post_p: &FieldSummary,
    post_m: &FieldSummary,
    prior_var_p: &DVector<f64>,
    prior_var_m: &DVector<f64>,
) -> Result<FieldMetrics> {
    Ok(FieldMetrics {
        e_p: relative_error(truth_p, &post_p.mean)?,
        e_m: relative_error(truth_m, &post_m.mean)?,
        u_p: uncertainty_ratio(&post_p.variance, prior_var_p)?,
        u_m: uncertainty_ratio(&post_m.variance, prior_var_m)?,
    })
}

/// Joint-vs-independent comparison for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub independent: FieldMetrics,
    pub joint: FieldMetrics,
    /// `max |D_p|`, `max |D_m|`; the full vectors go to CSV.
    pub d_p_max: f64,
    pub d_m_max: f64,
    /// Labelled effective sample sizes.
    pub ess: Vec<(String, f64)>,
    /// Labelled acceptance rates.
    pub acceptance: Vec<(String, f64)>,
}

/// Histogram counts over `bins` uniform bins of `(lo, hi)`; values outside are dropped.
pub fn histogram(x: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let w = (hi - lo) / bins as f64;
    for &v in x {
        if v >= lo && v < hi {
            counts[(((v - lo) / w) as usize).min(bins - 1)] += 1;
        }
    }
    counts
}

/// Joint histogram, `counts[i][j]` for `x` bin `i` and `y` bin `j`.
pub fn histogram_2d(x: &[f64], y: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0; bins]; bins];
    let w = (hi - lo) / bins as f64;
    for (&a, &b) in x.iter().zip(y) {
        if a >= lo && a < hi && b >= lo && b < hi {
            let i = (((a - lo) / w) as usize).min(bins - 1);
            let j = (((b - lo) / w) as usize).min(bins - 1);
            counts[i][j] += 1;
        }
    }
    counts
}

/// Kolmogorov-Smirnov distance of a sample from `U(lo, hi)`.
pub fn ks_uniform(x: &[f64], lo: f64, hi: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = ((s - lo) / (hi - lo)).clamp(0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn ar1(phi: f64, m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (1.0 - phi * phi).sqrt();
        let mut x = rng.sample::<f64, _>(StandardNormal);
        (0..m)
            .map(|_| {
                x = phi * x + scale * rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect()
    }

    #[test]
    fn autocorrelation_oracles() {
        let iid = ar1(0.0, 100_000, 1);
        let r = autocorrelation(&iid, 5).unwrap();
        assert_eq!(r[0], 1.0);
        assert!(r[1].abs() < 0.01);
        let r = autocorrelation(&ar1(0.8, 100_000, 2), 2).unwrap();
        assert!((r[1] - 0.8).abs() < 0.02);
        assert!((r[0] - 1.0).abs() < 1e-15);
        assert!(matches!(autocorrelation(&[2.0; 10], 3), Err(Error::ZeroVariance)));
        assert!(autocorrelation(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn ess_oracles() {
        let m = 100_000;
        let iid = ess(&ar1(0.0, m, 3)).unwrap() / m as f64;
        assert!((0.9..=1.1).contains(&iid), "{iid}");
        let phi = 0.8;
        let oracle = m as f64 * (1.0 - phi) / (1.0 + phi);
        let got = ess(&ar1(phi, m, 4)).unwrap();
        assert!((got / oracle - 1.0).abs() < 0.15, "{got} vs {oracle}");
        assert!(matches!(ess(&[1.0; 5]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn metric_identities() {
        let t = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(relative_error(&t, &t).unwrap(), 0.0);
        assert!(matches!(relative_error(&DVector::zeros(3), &t), Err(Error::ZeroNormTruth)));
        let v = DVector::from_vec(vec![0.5, 2.0, 1.0]);
        assert_eq!(uncertainty_ratio(&v, &v).unwrap(), 1.0);
        assert_eq!(std_difference(&v, &v).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn histogram_and_median() {
        let x = [-0.99, -0.5, 0.0, 0.01, 0.999, 1.0, -1.0];
        let h = histogram(&x, -1.0, 1.0, 50);
        assert_eq!(h.iter().sum::<usize>(), 6);
        assert_eq!(h[0], 2);
        assert_eq!(h[49], 1);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let h2 = histogram_2d(&[0.1, -0.1], &[0.1, 0.1], -1.0, 1.0, 2);
        assert_eq!(h2, vec![vec![0, 1], vec![0, 1]]);
        let u: Vec<f64> = (0..1000).map(|i| -1.0 + (2 * i + 1) as f64 / 1000.0).collect();
        assert!(ks_uniform(&u, -1.0, 1.0) < 1e-3 + 1e-12);
    }
}
