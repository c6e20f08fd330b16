//! Resampling-based inference and second-stage summaries.
//!
//! Variance estimation perturbs the objective with nonnegative i.i.d.
//! weights of mean 1 and variance 1 (Exponential(1) by default): each
//! replicate reweights the pooled variance estimate and the corrected
//! objective, refits from the point estimate, and the spread of the refits
//! estimates the sampling variability. Confidence intervals come from the
//! normal approximation (percentile intervals are emitted alongside).
//!
//! Second-stage summaries integrate the coefficient path over a quantile
//! window: a trapezoidal average effect, and a constancy test whose
//! statistic is the indicator-weighted centered integral
//! `T_j = integral over [tau_L, tau_U] of Xi(tau) (beta_j(tau) - mean) dtau`
//! with `Xi(v) = I(v > (tau_L + tau_U)/2)`, calibrated against the same
//! functional of the re-centered resampling draws.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::estimator::{domain, minimize_corrected, naive_qr_fast};
use crate::loss::{pairwise_sum, LossParams, ObjectiveData};
use crate::optim::OptimOptions;
use crate::rng::Stream;
use crate::stage1::StageOne;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("need at least two resampling replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("tau window ({lo}, {hi}) is invalid or outside the fitted grid")]
    WindowOutOfRange { lo: f64, hi: f64 },
    #[error("tau window must span at least two grid steps")]
    WindowTooNarrow,
    #[error("covariate index {j} out of range (p = {p})")]
    CovariateOutOfRange { j: usize, p: usize },
}

/// Distribution of the resampling weights. Mean 1 and variance 1 is
/// required for validity; `DegenerateOnes` is a test hook that reproduces
/// the point estimates exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    Exponential,
    DegenerateOnes,
}

#[derive(Debug, Clone, Copy)]
pub struct ResampleOptions {
    pub n_b: usize,
    pub alpha: f64,
    pub weights: WeightScheme,
}

impl Default for ResampleOptions {
    fn default() -> Self {
        ResampleOptions { n_b: 200, alpha: 0.05, weights: WeightScheme::Exponential }
    }
}

/// Resampling draws and the summaries computed from them. Indexing is
/// `[tau][coef]` for summaries and `[replicate][tau][coef]` for draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampleDraws {
    pub tau_grid: Vec<f64>,
    pub alpha: f64,
    pub n_b_requested: usize,
    pub n_b_used: usize,
    pub n_b_dropped: usize,
    /// Set when more than 10% of replicates were dropped.
    pub flagged: bool,
    pub beta_star: Vec<Vec<Vec<f64>>>,
    pub sigma2_star: Vec<f64>,
    pub se: Vec<Vec<f64>>,
    pub ci_lower: Vec<Vec<f64>>,
    pub ci_upper: Vec<Vec<f64>>,
    pub pct_lower: Vec<Vec<f64>>,
    pub pct_upper: Vec<Vec<f64>>,
    pub beta_star_naive: Option<Vec<Vec<Vec<f64>>>>,
    pub se_naive: Option<Vec<Vec<f64>>>,
    pub ci_lower_naive: Option<Vec<Vec<f64>>>,
    pub ci_upper_naive: Option<Vec<Vec<f64>>>,
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = pairwise_sum(values) / n as f64;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    (pairwise_sum(&sq) / (n - 1) as f64).sqrt()
}

/// Empirical quantile with linear interpolation at position p (n + 1)
/// (the convention usual for resampling critical values; slightly wider
/// tails than interpolating at p (n - 1), which matters for test size at
/// a few hundred draws).
fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p * (n + 1) as f64 - 1.0).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi.min(n - 1)] - sorted[lo])
}

struct Replicate {
    beta: Vec<Vec<f64>>,
    beta_naive: Option<Vec<Vec<f64>>>,
    sigma2: f64,
}

/// Wild-weight resampling of the corrected estimator over `tau_grid`,
/// started from the point estimates `beta_hat`. When `known_sigma2` is
/// supplied the per-replicate variance resampling is skipped and that value
/// is used directly. When `beta_naive` is given the naive estimator is
/// resampled with the same weight draws. Replicates whose fits do not
/// converge are dropped and counted; losing more than 10% sets `flagged`.
#[allow(clippy::too_many_arguments)]
pub fn resample_fit(
    data: &ObjectiveData,
    stage1: &StageOne,
    known_sigma2: Option<f64>,
    beta_hat: &[Vec<f64>],
    beta_naive: Option<&[Vec<f64>]>,
    tau_grid: &[f64],
    h: f64,
    opts: &ResampleOptions,
    stream: &Stream,
) -> Result<ResampleDraws, InferenceError> {
    if opts.n_b < 2 {
        return Err(InferenceError::TooFewReplicates(opts.n_b));
    }
    assert_eq!(beta_hat.len(), tau_grid.len());
    let n = data.n;
    let p = data.p;
    let q = stage1.gamma.len();
    let pooled_dof = stage1.n_obs_used as f64 - (q * stage1.n_used) as f64;
    let rss: Vec<f64> = stage1.fits.iter().map(|f| f.rss).collect();
    let optim_opts = OptimOptions::default();
    let root = stream.derive(domain::RESAMPLE);

    let run_one = |r: usize| -> Option<Replicate> {
        let mut s = root.derive(r as u64);
        let w: Vec<f64> = match opts.weights {
            WeightScheme::Exponential => (0..n).map(|_| s.exponential(1.0)).collect(),
            WeightScheme::DegenerateOnes => vec![1.0; n],
        };
        let sigma2 = match known_sigma2 {
            Some(s2) => s2,
            None => {
                let num: f64 = w.iter().zip(&rss).map(|(wi, ri)| wi * ri).sum::<f64>() / pooled_dof;
                let den: f64 = w.iter().sum::<f64>() / n as f64;
                num / den
            }
        };
        let mut beta = Vec::with_capacity(tau_grid.len());
        for (ti, &tau) in tau_grid.iter().enumerate() {
            let params = LossParams { tau, h, sigma2 };
            let res = minimize_corrected(data, &beta_hat[ti], &params, Some(&w), &optim_opts);
            if !res.converged {
                return None;
            }
            beta.push(res.x);
        }
        let naive_draws = if beta_naive.is_some() {
            let mut nb = Vec::with_capacity(tau_grid.len());
            for &tau in tau_grid {
                nb.push(naive_qr_fast(&data.b_hat, &data.x, p, tau, Some(&w))?);
            }
            Some(nb)
        } else {
            None
        };
        Some(Replicate { beta, beta_naive: naive_draws, sigma2 })
    };

    let replicates: Vec<Option<Replicate>> = if opts.n_b >= 16 {
        (0..opts.n_b).into_par_iter().map(run_one).collect()
    } else {
        (0..opts.n_b).map(run_one).collect()
    };

    let kept: Vec<Replicate> = replicates.into_iter().flatten().collect();
    let n_b_used = kept.len();
    let n_b_dropped = opts.n_b - n_b_used;
    let flagged = n_b_dropped * 10 > opts.n_b;
    if flagged {
        log::warn!(
            "resampling dropped {n_b_dropped} of {} replicates (> 10%); results flagged",
            opts.n_b
        );
    }
    if n_b_used < 2 {
        return Err(InferenceError::TooFewReplicates(n_b_used));
    }

    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - opts.alpha / 2.0);
    let n_tau = tau_grid.len();
    let summarize = |draws: &dyn Fn(usize, usize, usize) -> f64, center: &[Vec<f64>]| {
        let mut se = vec![vec![0.0; p]; n_tau];
        let mut lo = vec![vec![0.0; p]; n_tau];
        let mut hi = vec![vec![0.0; p]; n_tau];
        let mut plo = vec![vec![0.0; p]; n_tau];
        let mut phi = vec![vec![0.0; p]; n_tau];
        for ti in 0..n_tau {
            for c in 0..p {
                let col: Vec<f64> = (0..n_b_used).map(|r| draws(r, ti, c)).collect();
                let sd = sample_sd(&col);
                se[ti][c] = sd;
                lo[ti][c] = center[ti][c] - z * sd;
                hi[ti][c] = center[ti][c] + z * sd;
                let mut sorted = col;
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                plo[ti][c] = empirical_quantile(&sorted, opts.alpha / 2.0);
                phi[ti][c] = empirical_quantile(&sorted, 1.0 - opts.alpha / 2.0);
            }
        }
        (se, lo, hi, plo, phi)
    };

    let (se, ci_lower, ci_upper, pct_lower, pct_upper) =
        summarize(&|r, ti, c| kept[r].beta[ti][c], beta_hat);

    let (beta_star_naive, se_naive, ci_lower_naive, ci_upper_naive) = match beta_naive {
        Some(naive_center) => {
            let (sen, lon, hin, _, _) =
                summarize(&|r, ti, c| kept[r].beta_naive.as_ref().unwrap()[ti][c], naive_center);
            (
                Some(kept.iter().map(|k| k.beta_naive.clone().unwrap()).collect()),
                Some(sen),
                Some(lon),
                Some(hin),
            )
        }
        None => (None, None, None, None),
    };

    Ok(ResampleDraws {
        tau_grid: tau_grid.to_vec(),
        alpha: opts.alpha,
        n_b_requested: opts.n_b,
        n_b_used,
        n_b_dropped,
        flagged,
        beta_star: kept.iter().map(|k| k.beta.clone()).collect(),
        sigma2_star: kept.iter().map(|k| k.sigma2).collect(),
        se,
        ci_lower,
        ci_upper,
        pct_lower,
        pct_upper,
        beta_star_naive,
        se_naive,
        ci_lower_naive,
        ci_upper_naive,
    })
}

/// Integral of the piecewise-linear interpolant of `(grid, values)` over
/// `[a, b]`, with `a` and `b` inside the grid span.
fn integrate_linear(grid: &[f64], values: &[f64], a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    let value_at = |t: f64| -> f64 {
        match grid.iter().position(|&g| g >= t) {
            Some(0) => values[0],
            Some(k) => {
                let (g0, g1) = (grid[k - 1], grid[k]);
                let w = (t - g0) / (g1 - g0);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
            None => *values.last().unwrap(),
        }
    };
    let mut knots = vec![a];
    for &g in grid {
        if g > a && g < b {
            knots.push(g);
        }
    }
    knots.push(b);
    let mut acc = 0.0;
    for w in knots.windows(2) {
        acc += 0.5 * (value_at(w[0]) + value_at(w[1])) * (w[1] - w[0]);
    }
    acc
}

/// The constancy-test functional: with `mid = (tau_L + tau_U)/2` and
/// `mean` the trapezoidal average over the window,
/// `T = integral_{mid}^{tau_U} (curve(tau) - mean) dtau`.
/// The functional is translation invariant, so the path is shifted by its
/// first value before integrating; a constant path then gives exactly 0.
pub fn constancy_functional(grid: &[f64], values: &[f64], window: (f64, f64)) -> f64 {
    let (lo, hi) = window;
    let mid = 0.5 * (lo + hi);
    let shift = values[0];
    let shifted: Vec<f64> = values.iter().map(|v| v - shift).collect();
    let mean = integrate_linear(grid, &shifted, lo, hi) / (hi - lo);
    let centered: Vec<f64> = shifted.iter().map(|v| v - mean).collect();
    integrate_linear(grid, &centered, mid, hi)
}

fn validate_window(grid: &[f64], window: (f64, f64)) -> Result<(), InferenceError> {
    let (lo, hi) = window;
    if !(lo < hi) || lo < grid[0] - 1e-12 || hi > grid[grid.len() - 1] + 1e-12 {
        return Err(InferenceError::WindowOutOfRange { lo, hi });
    }
    let inside = grid.iter().filter(|&&g| g >= lo - 1e-12 && g <= hi + 1e-12).count();
    if inside < 3 {
        return Err(InferenceError::WindowTooNarrow);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstancyTestResult {
    pub covariate_index: usize,
    pub statistic: f64,
    /// Rejection region is (-inf, lower) union (upper, inf).
    pub lower: f64,
    pub upper: f64,
    pub reject: bool,
    pub tau_window: (f64, f64),
    pub alpha: f64,
}

/// Test whether coefficient `j` is constant over the window. The critical
/// values are the alpha/2 and 1-alpha/2 empirical quantiles of the
/// functional applied to the resampling draws re-centered at the point
/// estimate path.
pub fn constancy_test(
    draws: &ResampleDraws,
    beta_hat: &[Vec<f64>],
    j: usize,
    tau_window: (f64, f64),
    alpha: f64,
) -> Result<ConstancyTestResult, InferenceError> {
    let grid = &draws.tau_grid;
    validate_window(grid, tau_window)?;
    let p = beta_hat[0].len();
    if j >= p {
        return Err(InferenceError::CovariateOutOfRange { j, p });
    }
    let path: Vec<f64> = beta_hat.iter().map(|b| b[j]).collect();
    let statistic = constancy_functional(grid, &path, tau_window);

    let mut centered: Vec<f64> = draws
        .beta_star
        .iter()
        .map(|rep| {
            let draw_path: Vec<f64> = rep.iter().map(|b| b[j]).collect();
            constancy_functional(grid, &draw_path, tau_window) - statistic
        })
        .collect();
    centered.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lower = empirical_quantile(&centered, alpha / 2.0);
    let upper = empirical_quantile(&centered, 1.0 - alpha / 2.0);
    let reject = statistic < lower || statistic > upper;
    Ok(ConstancyTestResult {
        covariate_index: j,
        statistic,
        lower,
        upper,
        reject,
        tau_window,
        alpha,
    })
}

/// Trapezoidal average of each coefficient path over the window, with
/// resampling standard errors when draws are given. The average's SE
/// exceeding every pointwise SE is only logged: it is a diagnostic, not an
/// invariant.
pub fn average_effect(
    beta_hat: &[Vec<f64>],
    tau_grid: &[f64],
    tau_window: (f64, f64),
    draws: Option<&ResampleDraws>,
) -> Result<(Vec<f64>, Option<Vec<f64>>), InferenceError> {
    validate_window(tau_grid, tau_window)?;
    let (lo, hi) = tau_window;
    let p = beta_hat[0].len();
    let avg: Vec<f64> = (0..p)
        .map(|c| {
            let path: Vec<f64> = beta_hat.iter().map(|b| b[c]).collect();
            integrate_linear(tau_grid, &path, lo, hi) / (hi - lo)
        })
        .collect();
    let se = draws.map(|d| {
        (0..p)
            .map(|c| {
                let vals: Vec<f64> = d
                    .beta_star
                    .iter()
                    .map(|rep| {
                        let path: Vec<f64> = rep.iter().map(|b| b[c]).collect();
                        integrate_linear(&d.tau_grid, &path, lo, hi) / (hi - lo)
                    })
                    .collect();
                sample_sd(&vals)
            })
            .collect::<Vec<f64>>()
    });
    if let (Some(se), Some(d)) = (&se, draws) {
        for c in 0..p {
            let max_pointwise = d
                .se
                .iter()
                .zip(&d.tau_grid)
                .filter(|(_, t)| **t >= lo && **t <= hi)
                .map(|(row, _)| row[c])
                .fold(0.0f64, f64::max);
            if se[c] > max_pointwise && max_pointwise > 0.0 {
                log::warn!(
                    "average-effect SE {} exceeds max pointwise SE {} for coefficient {}",
                    se[c],
                    max_pointwise,
                    c
                );
            }
        }
    }
    Ok((avg, se))
}
