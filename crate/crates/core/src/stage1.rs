//! Stage one: per-subject trajectory fits and the pooled error variance.
//!
//! Each subject's outcomes are regressed on a polynomial time design by
//! least squares. The latent feature proxy is `b_hat = gamma' alpha_hat`,
//! where `gamma` is the derivative contrast of the polynomial at `t_star`.
//! The proxy error has variance `sigma2 * d` with
//! `d = delta * gamma' (Z'Z)^{-1} gamma`, and the pooled residual sums give
//! the variance estimate `sigma2_hat = sum(RSS_i) / (N - q n)`.
//!
//! Least squares goes through an orthogonal decomposition (SVD) rather than
//! normal equations: the same factorization yields `alpha_hat`, `d`, and a
//! reciprocal-condition check that catches near-collinear designs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{LongitudinalDataset, ModelConfig, SubjectRecord};

/// Reciprocal condition number of Z'Z below which a design counts as singular.
const RCOND_MIN: f64 = 1e-12;

/// Subjects fitted in parallel above this count; results are identical
/// either way because outcomes land in per-subject slots.
const PAR_THRESHOLD: usize = 512;

#[derive(Debug, Error)]
pub enum Stage1Error {
    #[error("feature undefined for constant trajectory (k = 0)")]
    ConstantTrajectory,
    #[error("insufficient residual degrees of freedom: N - q*n = {dof}")]
    InsufficientDof { dof: i64 },
    #[error("no subject has enough observations for the order-{k} model")]
    NoUsableSubjects { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    TooFewObservations,
    SingularDesign,
}

impl std::fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExclusionReason::TooFewObservations => write!(f, "too_few_observations"),
            ExclusionReason::SingularDesign => write!(f, "singular_design"),
        }
    }
}

/// Per-subject stage-one quantities for an included subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectFit {
    /// Index into the dataset's canonical subject order.
    pub subject_index: usize,
    pub alpha_hat: Vec<f64>,
    pub b_hat: f64,
    /// Variance multiplier of the proxy error: delta * gamma'(Z'Z)^{-1}gamma.
    pub d: f64,
    /// Residual sum of squares on the delta-standardized scale.
    pub rss: f64,
    pub m: usize,
}

pub enum SubjectOutcome {
    Fitted(SubjectFit),
    Excluded(ExclusionReason),
}

/// Results of the stage-one pass over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOne {
    pub gamma: Vec<f64>,
    pub fits: Vec<SubjectFit>,
    pub excluded: Vec<(String, ExclusionReason)>,
    pub sigma2_hat: f64,
    /// Subjects contributing to the fits and the pooled variance.
    pub n_used: usize,
    /// Total observations over included subjects.
    pub n_obs_used: usize,
}

/// Vandermonde design: entry (j, l) = t_j^l for l = 0..k.
pub fn build_design_matrix(times: &[f64], k: usize) -> DMatrix<f64> {
    let m = times.len();
    let q = k + 1;
    DMatrix::from_fn(m, q, |j, l| times[j].powi(l as i32))
}

/// Derivative contrast of the order-k polynomial at `t_star`:
/// gamma = (0, 1, 2 t*, ..., k t*^{k-1}).
pub fn feature_contrast(k: usize, t_star: f64) -> Result<DVector<f64>, Stage1Error> {
    if k == 0 {
        return Err(Stage1Error::ConstantTrajectory);
    }
    let mut g = DVector::zeros(k + 1);
    for j in 1..=k {
        g[j] = j as f64 * t_star.powi(j as i32 - 1);
    }
    Ok(g)
}

/// Least-squares fit for one subject. Returns `Excluded` when the subject
/// has no residual degrees of freedom (m <= q) or the design is numerically
/// singular.
pub fn fit_subject(record: &SubjectRecord, k: usize, gamma: &DVector<f64>) -> SubjectOutcome {
    let m = record.m();
    let q = k + 1;
    if m < q + 1 {
        return SubjectOutcome::Excluded(ExclusionReason::TooFewObservations);
    }
    let z = build_design_matrix(&record.times, k);
    let svd = z.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    // rcond of Z'Z is (smin/smax)^2.
    if !(smax > 0.0) || (smin / smax) * (smin / smax) < RCOND_MIN {
        return SubjectOutcome::Excluded(ExclusionReason::SingularDesign);
    }
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");

    let y = DVector::from_column_slice(&record.y);
    // alpha = V diag(1/s) U' y
    let mut uty = u.transpose() * &y;
    for l in 0..q {
        uty[l] /= sv[l];
    }
    let alpha = v_t.transpose() * uty;

    // d = delta * || diag(1/s) V gamma ||^2
    let mut vg = v_t * gamma;
    for l in 0..q {
        vg[l] /= sv[l];
    }
    let d = record.delta * vg.norm_squared();

    let resid = &y - &z * &alpha;
    let rss = resid.norm_squared() / record.delta;
    let b_hat = gamma.dot(&alpha);

    SubjectOutcome::Fitted(SubjectFit {
        subject_index: usize::MAX, // assigned by the caller
        alpha_hat: alpha.iter().copied().collect(),
        b_hat,
        d,
        rss,
        m,
    })
}

/// Pooled variance estimate sum(RSS_i) / (N - q n) over included subjects.
pub fn pooled_sigma2(rss_and_m: &[(f64, usize)], q: usize) -> Result<f64, Stage1Error> {
    let n = rss_and_m.len();
    let total_obs: usize = rss_and_m.iter().map(|(_, m)| m).sum();
    let dof = total_obs as i64 - (q * n) as i64;
    if dof <= 0 {
        return Err(Stage1Error::InsufficientDof { dof });
    }
    let rss_sum: f64 = rss_and_m.iter().map(|(r, _)| r).sum();
    Ok(rss_sum / dof as f64)
}

/// Run stage one over the whole dataset: fit every subject, report
/// exclusions, and pool the residuals into `sigma2_hat`.
pub fn run_stage_one(
    dataset: &LongitudinalDataset,
    config: &ModelConfig,
) -> Result<StageOne, Stage1Error> {
    let gamma = feature_contrast(config.k, config.t_star)?;
    let q = config.k + 1;

    if config.k >= 2 {
        let t_max = dataset
            .subjects()
            .iter()
            .flat_map(|s| s.times.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        if t_max > 100.0 {
            log::warn!(
                "observation times reach {t_max:.1} with k = {}; Vandermonde designs this wide \
                 can be ill-conditioned and times are never rescaled internally",
                config.k
            );
        }
    }

    let fit_one = |(i, s): (usize, &SubjectRecord)| match fit_subject(s, config.k, &gamma) {
        SubjectOutcome::Fitted(mut f) => {
            f.subject_index = i;
            Ok(f)
        }
        SubjectOutcome::Excluded(reason) => Err((s.id.clone(), reason)),
    };
    let outcomes: Vec<Result<SubjectFit, (String, ExclusionReason)>> =
        if dataset.n() >= PAR_THRESHOLD {
            dataset.subjects().par_iter().enumerate().map(fit_one).collect()
        } else {
            dataset.subjects().iter().enumerate().map(fit_one).collect()
        };

    let mut fits = Vec::new();
    let mut excluded = Vec::new();
    for o in outcomes {
        match o {
            Ok(f) => fits.push(f),
            Err(e) => excluded.push(e),
        }
    }
    if fits.is_empty() {
        return Err(Stage1Error::NoUsableSubjects { k: config.k });
    }

    let rss_and_m: Vec<(f64, usize)> = fits.iter().map(|f| (f.rss, f.m)).collect();
    let sigma2_hat = pooled_sigma2(&rss_and_m, q)?;
    let n_used = fits.len();
    let n_obs_used = fits.iter().map(|f| f.m).sum();

    Ok(StageOne { gamma: gamma.iter().copied().collect(), fits, excluded, sigma2_hat, n_used, n_obs_used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ErrorFamily;
    use approx::assert_relative_eq;

    fn record(times: &[f64], y: &[f64], delta: f64) -> SubjectRecord {
        SubjectRecord {
            id: "t".into(),
            times: times.to_vec(),
            y: y.to_vec(),
            x: vec![1.0],
            delta,
        }
    }

    #[test]
    fn design_matrix_examples() {
        let z = build_design_matrix(&[0.0, 1.0, 2.0], 1);
        assert_eq!(z, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]));

        let z = build_design_matrix(&[2.0], 2);
        assert_eq!(z, DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]));

        let z = build_design_matrix(&[0.5, 1.5], 0);
        assert_eq!(z, DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
    }

    #[test]
    fn feature_contrast_examples() {
        assert_eq!(feature_contrast(1, 123.0).unwrap().as_slice(), &[0.0, 1.0]);
        assert_eq!(feature_contrast(2, 3.0).unwrap().as_slice(), &[0.0, 1.0, 6.0]);
        assert!(matches!(feature_contrast(0, 1.0), Err(Stage1Error::ConstantTrajectory)));
    }

    /// Oracle for the k=3 contrast: numerically differentiate the polynomial
    /// sum(alpha_j t^j) at t_star and compare with gamma . alpha.
    #[test]
    fn feature_contrast_matches_polynomial_derivative() {
        let k = 3;
        let t_star = 2.0;
        let gamma = feature_contrast(k, t_star).unwrap();
        assert_eq!(gamma.as_slice(), &[0.0, 1.0, 4.0, 12.0]);

        let alpha = [0.7, -1.3, 0.25, 0.4];
        let poly = |t: f64| alpha.iter().enumerate().map(|(j, a)| a * t.powi(j as i32)).sum::<f64>();
        let eps = 1e-6;
        let fd = (poly(t_star + eps) - poly(t_star - eps)) / (2.0 * eps);
        let analytic: f64 = gamma.iter().zip(alpha.iter()).map(|(g, a)| g * a).sum();
        assert_relative_eq!(fd, analytic, max_relative = 1e-8);
    }

    #[test]
    fn exact_line_has_zero_residual() {
        let gamma = feature_contrast(1, 0.0).unwrap();
        match fit_subject(&record(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0], 1.0), 1, &gamma) {
            SubjectOutcome::Fitted(f) => {
                assert_relative_eq!(f.alpha_hat[0], 1.0, epsilon = 1e-12);
                assert_relative_eq!(f.alpha_hat[1], 1.0, epsilon = 1e-12);
                assert!(f.rss < 1e-20);
                assert_relative_eq!(f.b_hat, 1.0, epsilon = 1e-12);
            }
            _ => panic!("expected fit"),
        }
    }

    #[test]
    fn saturated_fit_is_excluded() {
        let gamma = feature_contrast(1, 0.0).unwrap();
        match fit_subject(&record(&[0.0, 1.0], &[5.0, 5.0], 1.0), 1, &gamma) {
            SubjectOutcome::Excluded(ExclusionReason::TooFewObservations) => {}
            _ => panic!("m = q must be excluded"),
        }
    }

    /// Frozen from the closed-form simple-linear-regression oracle computed
    /// here: slope = Sxy/Sxx, intercept = ybar - slope*xbar.
    #[test]
    fn four_point_line_matches_closed_form() {
        let times = [0.0, 1.0, 2.0, 3.0];
        let y = [0.0, 1.0, 0.0, 1.0];
        let xbar = times.iter().sum::<f64>() / 4.0;
        let ybar = y.iter().sum::<f64>() / 4.0;
        let sxy: f64 = times.iter().zip(&y).map(|(t, v)| (t - xbar) * (v - ybar)).sum();
        let sxx: f64 = times.iter().map(|t| (t - xbar) * (t - xbar)).sum();
        let slope = sxy / sxx;
        let intercept = ybar - slope * xbar;
        assert_relative_eq!(slope, 0.2, epsilon = 1e-15);
        assert_relative_eq!(intercept, 0.2, epsilon = 1e-15);
        let rss_oracle: f64 = times
            .iter()
            .zip(&y)
            .map(|(t, v)| (v - intercept - slope * t).powi(2))
            .sum();

        let gamma = feature_contrast(1, 0.0).unwrap();
        match fit_subject(&record(&times, &y, 1.0), 1, &gamma) {
            SubjectOutcome::Fitted(f) => {
                assert_relative_eq!(f.alpha_hat[0], intercept, epsilon = 1e-12);
                assert_relative_eq!(f.alpha_hat[1], slope, epsilon = 1e-12);
                assert_relative_eq!(f.rss, rss_oracle, epsilon = 1e-12);
            }
            _ => panic!("expected fit"),
        }
    }

    #[test]
    fn repeated_times_reject_as_singular() {
        // Strictly increasing times are enforced upstream, but fit_subject
        // itself must also catch collinear designs.
        let gamma = feature_contrast(2, 0.0).unwrap();
        let r = record(&[1.0, 1.0 + 1e-14, 1.0 + 2e-14, 2.0], &[0.0, 0.0, 0.0, 1.0], 1.0);
        match fit_subject(&r, 2, &gamma) {
            SubjectOutcome::Excluded(ExclusionReason::SingularDesign) => {}
            SubjectOutcome::Excluded(r) => panic!("wrong reason {r:?}"),
            SubjectOutcome::Fitted(f) => panic!("should be singular, got d = {}", f.d),
        }
    }

    #[test]
    fn delta_scales_rss_and_d_but_not_alpha() {
        let gamma = feature_contrast(1, 0.0).unwrap();
        let base = record(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 0.0, 1.0], 1.0);
        let scaled = record(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 0.0, 1.0], 4.0);
        let (f1, f4) = match (fit_subject(&base, 1, &gamma), fit_subject(&scaled, 1, &gamma)) {
            (SubjectOutcome::Fitted(a), SubjectOutcome::Fitted(b)) => (a, b),
            _ => panic!(),
        };
        assert_eq!(f1.alpha_hat, f4.alpha_hat);
        assert_relative_eq!(f4.rss, f1.rss / 4.0, epsilon = 1e-12);
        assert_relative_eq!(f4.d, f1.d * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn pooled_sigma2_examples() {
        assert_relative_eq!(pooled_sigma2(&[(1.0, 3), (3.0, 3)], 2).unwrap(), 2.0);
        assert_eq!(pooled_sigma2(&[(0.0, 5), (0.0, 4)], 2).unwrap(), 0.0);
        assert!(matches!(
            pooled_sigma2(&[(1.0, 3)], 3),
            Err(Stage1Error::InsufficientDof { dof: 0 })
        ));
    }

    /// Perturbation identity: b_hat - b = gamma'(Z'Z)^{-1}Z' eps, subject by
    /// subject, checked against explicit normal-equation algebra.
    #[test]
    fn proxy_error_identity() {
        let stream = crate::rng::Stream::new(77);
        let gamma = feature_contrast(2, 1.5).unwrap();
        for rep in 0..50 {
            let mut s = stream.derive(rep);
            let m = 5 + (rep % 3) as usize;
            let times: Vec<f64> = (0..m).map(|j| j as f64 * 0.7 + s.uniform(0.01, 0.3)).collect();
            let alpha = DVector::from_vec(vec![s.normal(0.0, 2.0), s.normal(0.0, 1.0), s.normal(0.0, 0.5)]);
            let eps = DVector::from_fn(m, |_, _| s.normal(0.0, 0.6));
            let z = build_design_matrix(&times, 2);
            let y_vec: Vec<f64> = (&z * &alpha + &eps).iter().copied().collect();
            let rec = record(&times, &y_vec, 1.0);
            let f = match fit_subject(&rec, 2, &gamma) {
                SubjectOutcome::Fitted(f) => f,
                _ => continue,
            };
            let b_true = gamma.dot(&alpha);
            let ztz_inv = (z.transpose() * &z).try_inverse().unwrap();
            let eta = (gamma.transpose() * ztz_inv * z.transpose() * eps)[(0, 0)];
            assert_relative_eq!(f.b_hat - b_true, eta, epsilon = 1e-9, max_relative = 1e-7);
        }
    }

    /// Noise-free recovery at polynomial data: alpha recovered to 1e-10
    /// relative accuracy and rss at round-off scale.
    #[test]
    fn noise_free_recovery() {
        let gamma = feature_contrast(2, 1.0).unwrap();
        let s = crate::rng::Stream::new(3);
        for rep in 0..25 {
            let mut st = s.derive(rep);
            let m = 4 + (rep % 4) as usize;
            let times: Vec<f64> = (0..m).map(|j| j as f64 + st.uniform(0.0, 0.9)).collect();
            let alpha = [st.normal(0.0, 1.0), st.normal(0.0, 1.0), st.normal(0.0, 1.0)];
            let y: Vec<f64> = times
                .iter()
                .map(|t| alpha[0] + alpha[1] * t + alpha[2] * t * t)
                .collect();
            let norm2: f64 = y.iter().map(|v| v * v).sum();
            match fit_subject(&record(&times, &y, 1.0), 2, &gamma) {
                SubjectOutcome::Fitted(f) => {
                    for (a, b) in f.alpha_hat.iter().zip(alpha.iter()) {
                        assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-10);
                    }
                    assert!(f.rss <= 1e-16 * norm2.max(1.0), "rss = {}", f.rss);
                }
                _ => panic!("unexpected exclusion"),
            }
        }
    }

    #[test]
    fn stage_one_pools_and_reports_exclusions() {
        let subjects = vec![
            SubjectRecord {
                id: "a".into(),
                times: vec![0.0, 1.0, 2.0],
                y: vec![0.0, 1.1, 1.9],
                x: vec![1.0, 0.3],
                delta: 1.0,
            },
            SubjectRecord {
                id: "b".into(),
                times: vec![0.0, 1.0],
                y: vec![0.0, 1.0],
                x: vec![1.0, 0.4],
                delta: 1.0,
            },
            SubjectRecord {
                id: "c".into(),
                times: vec![0.0, 0.5, 1.5, 2.5],
                y: vec![0.2, 0.8, 1.7, 2.4],
                x: vec![1.0, 0.5],
                delta: 1.0,
            },
        ];
        let ds = LongitudinalDataset::new(subjects).unwrap();
        let cfg = ModelConfig::new(
            1,
            0.0,
            ErrorFamily::Normal,
            vec![0.5],
            crate::data::BandwidthSpec::Fixed(0.8),
            1,
        )
        .unwrap();
        let s1 = run_stage_one(&ds, &cfg).unwrap();
        assert_eq!(s1.n_used, 2);
        assert_eq!(s1.excluded.len(), 1);
        assert_eq!(s1.excluded[0].0, "b");
        assert_eq!(s1.n_obs_used, 7);
        let rss_sum: f64 = s1.fits.iter().map(|f| f.rss).sum();
        assert_relative_eq!(s1.sigma2_hat, rss_sum / (7.0 - 2.0 * 2.0), epsilon = 1e-12);
        // b_hat == gamma . alpha_hat exactly up to round-off
        for f in &s1.fits {
            let dot: f64 = s1.gamma.iter().zip(&f.alpha_hat).map(|(g, a)| g * a).sum();
            assert_relative_eq!(f.b_hat, dot, epsilon = 1e-12);
        }
    }
}
