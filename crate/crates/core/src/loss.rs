//! Check loss, smoothed check loss, and the bias-corrected loss.
//!
//! The smoothed check loss is `rho_{tau,h}(v) = v (tau - 1 + K(v/h))` with
//! `K` fixed to the standard normal distribution function. The corrected
//! loss subtracts half the proxy-error variance times the second derivative
//! of the smoothed loss:
//!
//! ```text
//! rho*(xi) = rho_{tau,h}(xi) - (sigma2/2) [ (2/h) K'(xi/h) + (xi/h^2) K''(xi/h) ]
//! ```
//!
//! which is exact for Laplace proxy errors and is the two-summand truncation
//! of the infinite series for normal proxy errors, so one code path serves
//! both families. All derivatives are analytic; nothing here differences.

use std::sync::Arc;

use crate::data::LongitudinalDataset;
use crate::stage1::StageOne;

/// Parameters of one loss evaluation: quantile level, bandwidth, and the
/// proxy-error variance on the standardized scale.
#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    pub tau: f64,
    pub h: f64,
    pub sigma2: f64,
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// Beyond this |u| the Gaussian factors underflow into denormals; treat as 0.
const TAIL_CUTOFF: f64 = 40.0;

/// Standard normal distribution function.
#[inline]
pub fn k0(u: f64) -> f64 {
    if u > TAIL_CUTOFF {
        return 1.0;
    }
    if u < -TAIL_CUTOFF {
        return 0.0;
    }
    0.5 * libm::erfc(-u * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density (first derivative of K).
#[inline]
pub fn k1(u: f64) -> f64 {
    if u.abs() > TAIL_CUTOFF {
        return 0.0;
    }
    FRAC_1_SQRT_2PI * (-0.5 * u * u).exp()
}

/// Second derivative of K: -u phi(u).
#[inline]
pub fn k2(u: f64) -> f64 {
    -u * k1(u)
}

/// Third derivative of K: (u^2 - 1) phi(u).
#[inline]
pub fn k3(u: f64) -> f64 {
    (u * u - 1.0) * k1(u)
}

/// Fourth derivative of K: u (3 - u^2) phi(u).
#[inline]
pub fn k4(u: f64) -> f64 {
    u * (3.0 - u * u) * k1(u)
}

#[inline]
fn k_deriv(order: u32, u: f64) -> f64 {
    match order {
        0 => k0(u),
        1 => k1(u),
        2 => k2(u),
        3 => k3(u),
        4 => k4(u),
        _ => unreachable!("kernel derivative order {order} not used"),
    }
}

/// The check loss `v (tau - I(v < 0))`.
#[inline]
pub fn rho_tau(v: f64, tau: f64) -> f64 {
    if v < 0.0 {
        v * (tau - 1.0)
    } else {
        v * tau
    }
}

/// Smoothed check loss `v (tau - 1 + K(v/h))`.
#[inline]
pub fn rho_smooth(v: f64, params: &LossParams) -> f64 {
    v * (params.tau - 1.0 + k0(v / params.h))
}

/// j-th derivative of `v K(v/h)` with respect to v:
/// `(j / h^{j-1}) K^{(j-1)}(v/h) + (v / h^j) K^{(j)}(v/h)` for j >= 1.
#[inline]
pub fn vk_derivative(v: f64, h: f64, j: u32) -> f64 {
    debug_assert!((1..=4).contains(&j));
    let u = v / h;
    let hp = h.powi(j as i32 - 1);
    (j as f64 / hp) * k_deriv(j - 1, u) + (u / hp) * k_deriv(j, u)
}

/// Corrected loss shared by the normal (two-summand) and Laplace families.
/// With `sigma2 = 0` this is exactly `rho_smooth`.
#[inline]
pub fn rho_corrected(xi_hat: f64, params: &LossParams) -> f64 {
    rho_smooth(xi_hat, params) - 0.5 * params.sigma2 * vk_derivative(xi_hat, params.h, 2)
}

/// Derivative of the corrected loss with respect to its argument.
#[inline]
pub fn rho_corrected_d1(xi_hat: f64, params: &LossParams) -> f64 {
    params.tau - 1.0 + vk_derivative(xi_hat, params.h, 1)
        - 0.5 * params.sigma2 * vk_derivative(xi_hat, params.h, 3)
}

/// Pairwise (cascade) summation: bit-stable regardless of how the terms were
/// produced, and far less error-prone than a running sum on long inputs.
pub fn pairwise_sum(terms: &[f64]) -> f64 {
    if terms.len() <= 32 {
        return terms.iter().sum();
    }
    let mid = terms.len() / 2;
    pairwise_sum(&terms[..mid]) + pairwise_sum(&terms[mid..])
}

/// Stage-two estimation inputs in per-subject array form: covariate rows,
/// feature proxies, and inverse perturbation scales for the included
/// subjects, in canonical subject order.
#[derive(Debug, Clone)]
pub struct ObjectiveData {
    pub n: usize,
    pub p: usize,
    /// Row-major n x p covariate matrix.
    pub x: Arc<[f64]>,
    pub b_hat: Arc<[f64]>,
    pub d_inv_sqrt: Arc<[f64]>,
}

impl ObjectiveData {
    pub fn from_stage_one(dataset: &LongitudinalDataset, stage1: &StageOne) -> Self {
        let p = dataset.p();
        let n = stage1.fits.len();
        let mut x = Vec::with_capacity(n * p);
        let mut b_hat = Vec::with_capacity(n);
        let mut d_inv_sqrt = Vec::with_capacity(n);
        for f in &stage1.fits {
            x.extend_from_slice(&dataset.subjects()[f.subject_index].x);
            b_hat.push(f.b_hat);
            d_inv_sqrt.push(1.0 / f.d.sqrt());
        }
        ObjectiveData { n, p, x: x.into(), b_hat: b_hat.into(), d_inv_sqrt: d_inv_sqrt.into() }
    }

    pub fn from_raw(x: Vec<f64>, b_hat: Vec<f64>, d_inv_sqrt: Vec<f64>, p: usize) -> Self {
        let n = b_hat.len();
        assert_eq!(x.len(), n * p);
        assert_eq!(d_inv_sqrt.len(), n);
        ObjectiveData { n, p, x: x.into(), b_hat: b_hat.into(), d_inv_sqrt: d_inv_sqrt.into() }
    }

    /// Same design with the feature proxies replaced (noise-augmented copies
    /// for bandwidth selection).
    pub fn with_b_hat(&self, b_hat: Vec<f64>) -> Self {
        assert_eq!(b_hat.len(), self.n);
        ObjectiveData {
            n: self.n,
            p: self.p,
            x: Arc::clone(&self.x),
            b_hat: b_hat.into(),
            d_inv_sqrt: Arc::clone(&self.d_inv_sqrt),
        }
    }
}

/// Corrected objective and its analytic gradient:
/// `sum_i w_i rho*(d_i^{-1/2} (b_i - x_i' beta))`, gradient via the chain
/// rule with `d xi_i / d beta = -d_i^{-1/2} x_i`. Per-subject terms are
/// accumulated by pairwise summation in canonical order, so the result does
/// not depend on scheduling.
pub fn corrected_objective(
    data: &ObjectiveData,
    beta: &[f64],
    params: &LossParams,
    weights: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let (n, p) = (data.n, data.p);
    debug_assert_eq!(beta.len(), p);
    if let Some(w) = weights {
        debug_assert_eq!(w.len(), n);
    }
    let mut val_terms = vec![0.0; n];
    let mut grad_terms = vec![0.0; n * p]; // column-major: [c*n + i]
    for i in 0..n {
        let xi_row = &data.x[i * p..(i + 1) * p];
        let mut fit = 0.0;
        for c in 0..p {
            fit += xi_row[c] * beta[c];
        }
        let dis = data.d_inv_sqrt[i];
        let xi = dis * (data.b_hat[i] - fit);
        let w = weights.map_or(1.0, |w| w[i]);
        val_terms[i] = w * rho_corrected(xi, params);
        let slope = -w * dis * rho_corrected_d1(xi, params);
        for c in 0..p {
            grad_terms[c * n + i] = slope * xi_row[c];
        }
    }
    let value = pairwise_sum(&val_terms);
    let grad = (0..p).map(|c| pairwise_sum(&grad_terms[c * n..(c + 1) * n])).collect();
    (value, grad)
}
