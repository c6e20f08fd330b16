//! Stage-two estimators: the naive quantile regression baseline and the
//! bias-corrected estimator over a quantile grid.
//!
//! The naive estimator regresses the feature proxies directly on the
//! covariates with the ordinary check loss. It is both the comparison
//! baseline and the optimizer start for the corrected fit. The corrected
//! estimator minimizes the corrected smoothed objective by BFGS from the
//! naive start plus a configurable number of jittered restarts, keeping the
//! best objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandwidth::{self, BandwidthSearch};
use crate::data::{BandwidthSpec, DataError, LongitudinalDataset, ModelConfig};
use crate::loss::{self, corrected_objective, LossParams, ObjectiveData};
use crate::optim::{self, OptimOptions, OptimResult};
use crate::rng::Stream;
use crate::stage1::{run_stage_one, Stage1Error, StageOne};

/// Stream-domain tags hung off the run seed, so the fitter, bandwidth
/// search, resampling, and replication harness never share random streams.
pub mod domain {
    pub const FIT: u64 = 1;
    pub const BANDWIDTH: u64 = 2;
    pub const RESAMPLE: u64 = 3;
    pub const REPLICATION: u64 = 4;
}

pub use domain::BANDWIDTH as BANDWIDTH_DOMAIN;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("need more subjects than covariates: n = {n}, p = {p}")]
    TooFewSubjects { n: usize, p: usize },
    #[error(transparent)]
    Stage1(#[from] Stage1Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Bandwidth(#[from] bandwidth::BandwidthError),
}

/// Exact check-loss objective `sum_i w_i rho_tau(b_i - x_i' beta)`.
pub fn check_objective(
    b: &[f64],
    x: &[f64],
    p: usize,
    beta: &[f64],
    tau: f64,
    weights: Option<&[f64]>,
) -> f64 {
    let n = b.len();
    let terms: Vec<f64> = (0..n)
        .map(|i| {
            let fit: f64 = (0..p).map(|c| x[i * p + c] * beta[c]).sum();
            weights.map_or(1.0, |w| w[i]) * loss::rho_tau(b[i] - fit, tau)
        })
        .collect();
    loss::pairwise_sum(&terms)
}

/// Weighted least squares via the normal equations (p is small).
fn wls_solve(b: &[f64], x: &[f64], p: usize, w: Option<&[f64]>) -> Option<Vec<f64>> {
    let n = b.len();
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for i in 0..n {
        let wi = w.map_or(1.0, |w| w[i]);
        let row = &x[i * p..(i + 1) * p];
        for c in 0..p {
            rhs[c] += wi * b[i] * row[c];
            for cc in c..p {
                a[(c, cc)] += wi * row[c] * row[cc];
            }
        }
    }
    for c in 0..p {
        for cc in 0..c {
            a[(c, cc)] = a[(cc, c)];
        }
    }
    let chol = a.clone().cholesky().or_else(|| {
        let ridge = 1e-12 * a.trace().max(1e-300) / p as f64;
        for c in 0..p {
            a[(c, c)] += ridge;
        }
        a.cholesky()
    })?;
    Some(chol.solve(&rhs).iter().copied().collect())
}

/// Exact interpolating fit through the `p` rows in `subset`.
fn basic_solution(b: &[f64], x: &[f64], p: usize, subset: &[usize]) -> Option<Vec<f64>> {
    let a = DMatrix::from_fn(p, p, |r, c| x[subset[r] * p + c]);
    let rhs = DVector::from_fn(p, |r, _| b[subset[r]]);
    let lu = a.lu();
    lu.solve(&rhs).and_then(|s| {
        let v: Vec<f64> = s.iter().copied().collect();
        v.iter().all(|z| z.is_finite()).then_some(v)
    })
}

/// Weighted empirical quantile with the right-continuous convention: the
/// smallest order statistic whose cumulative weight strictly exceeds
/// `tau * total`. Unweighted, this is the order statistic with one-based
/// index `floor(n tau) + 1`.
fn weighted_quantile(b: &[f64], tau: f64, weights: Option<&[f64]>) -> f64 {
    let n = b.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| b[i].partial_cmp(&b[j]).unwrap());
    let total: f64 = weights.map_or(n as f64, |w| w.iter().sum());
    let target = tau * total;
    let mut cum = 0.0;
    for &i in &idx {
        cum += weights.map_or(1.0, |w| w[i]);
        if cum > target {
            return b[i];
        }
    }
    b[idx[n - 1]]
}

enum Polish {
    /// Snap to the nearest basic solution, pivot to a local (= global, by
    /// convexity) optimum of the exact objective.
    Full,
    /// Snap only; adequate for resampling draws where the start is warm.
    Snap,
}

fn naive_qr_impl(
    b: &[f64],
    x: &[f64],
    p: usize,
    tau: f64,
    weights: Option<&[f64]>,
    polish: Polish,
) -> Option<Vec<f64>> {
    let n = b.len();
    if p == 1 {
        return Some(vec![weighted_quantile(b, tau, weights)]);
    }

    // IRLS on the epsilon-smoothed check loss.
    const EPS: f64 = 1e-8;
    let mut beta = wls_solve(b, x, p, weights)?;
    let mut irls_w = vec![0.0; n];
    for _ in 0..200 {
        for i in 0..n {
            let fit: f64 = (0..p).map(|c| x[i * p + c] * beta[c]).sum();
            let r = b[i] - fit;
            let asym = if r >= 0.0 { tau } else { 1.0 - tau };
            irls_w[i] = weights.map_or(1.0, |w| w[i]) * asym / r.abs().max(EPS);
        }
        let next = wls_solve(b, x, p, Some(&irls_w))?;
        let delta: f64 = next
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = beta.iter().map(|v| v * v).sum::<f64>().sqrt();
        beta = next;
        if delta <= 1e-10 * (1.0 + scale) {
            break;
        }
    }

    let objective = |beta: &[f64]| check_objective(b, x, p, beta, tau, weights);
    let mut best_beta = beta.clone();
    let mut best_f = objective(&beta);

    // Snap to a basic solution near the IRLS iterate: a check-loss optimum
    // always sits at an exact fit through p observations.
    let mut resid_order: Vec<usize> = (0..n).collect();
    let resid = |i: usize, beta: &[f64]| -> f64 {
        let fit: f64 = (0..p).map(|c| x[i * p + c] * beta[c]).sum();
        (b[i] - fit).abs()
    };
    resid_order.sort_by(|&i, &j| resid(i, &beta).partial_cmp(&resid(j, &beta)).unwrap());
    let pool: Vec<usize> = resid_order.iter().copied().take((p + 4).min(n)).collect();
    let mut basis: Option<Vec<usize>> = None;
    let mut combo: Vec<usize> = (0..p).collect(); // indices into pool
    for _ in 0..80 {
        let subset: Vec<usize> = combo.iter().map(|&c| pool[c]).collect();
        if let Some(cand) = basic_solution(b, x, p, &subset) {
            let f = objective(&cand);
            if f <= best_f {
                best_f = f;
                best_beta = cand;
            }
            basis = Some(subset);
            break;
        }
        // next lexicographic combination of pool indices
        let mut k = p;
        loop {
            if k == 0 {
                break;
            }
            k -= 1;
            if combo[k] < pool.len() - (p - k) {
                combo[k] += 1;
                for j in k + 1..p {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
        if combo[0] > pool.len().saturating_sub(p) {
            break;
        }
    }

    if let (Polish::Full, Some(mut basis)) = (polish, basis) {
        // Vertex descent on the exact objective. The objective is convex and
        // piecewise linear, so no improving swap means global optimality.
        for _round in 0..60 {
            let mut improved = false;
            let mut in_basis = vec![false; n];
            for &i in &basis {
                in_basis[i] = true;
            }
            let mut best_swap: Option<(usize, usize, f64, Vec<f64>)> = None;
            for slot in 0..p {
                for j in 0..n {
                    if in_basis[j] {
                        continue;
                    }
                    let mut trial = basis.clone();
                    trial[slot] = j;
                    if let Some(cand) = basic_solution(b, x, p, &trial) {
                        let f = objective(&cand);
                        if f < best_f - 1e-13 * (1.0 + best_f.abs())
                            && best_swap.as_ref().map_or(true, |(_, _, bf, _)| f < *bf)
                        {
                            best_swap = Some((slot, j, f, cand));
                        }
                    }
                }
            }
            if let Some((slot, j, f, cand)) = best_swap {
                basis[slot] = j;
                best_f = f;
                best_beta = cand;
                improved = true;
            }
            if !improved {
                break;
            }
        }
    }

    Some(best_beta)
}

/// Naive quantile regression of the proxies on the covariates (check-loss
/// minimizer). Baseline estimator and optimizer start.
pub fn naive_qr(
    b_hat: &[f64],
    x: &[f64],
    p: usize,
    tau: f64,
) -> Result<Vec<f64>, EstimatorError> {
    naive_qr_weighted(b_hat, x, p, tau, None)
}

/// Weighted variant used by the resampling procedures.
pub fn naive_qr_weighted(
    b_hat: &[f64],
    x: &[f64],
    p: usize,
    tau: f64,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>, EstimatorError> {
    let n = b_hat.len();
    if n <= p {
        return Err(EstimatorError::TooFewSubjects { n, p });
    }
    if p > 1 {
        let xm = DMatrix::from_row_slice(n, p, x);
        let sv = xm.svd(false, false).singular_values;
        if !(sv.max() > 0.0) || sv.min() / sv.max() < 1e-10 {
            return Err(EstimatorError::RankDeficient);
        }
    }
    naive_qr_impl(b_hat, x, p, tau, weights, Polish::Full).ok_or(EstimatorError::RankDeficient)
}

/// Cheap naive fit for resampling draws: IRLS plus snap, no pivot scan, no
/// rank re-check (the design does not change across draws).
pub(crate) fn naive_qr_fast(
    b_hat: &[f64],
    x: &[f64],
    p: usize,
    tau: f64,
    weights: Option<&[f64]>,
) -> Option<Vec<f64>> {
    naive_qr_impl(b_hat, x, p, tau, weights, Polish::Snap)
}

/// One corrected minimization from a given start (shared by the fitter,
/// bandwidth selection, and resampling).
pub fn minimize_corrected(
    data: &ObjectiveData,
    start: &[f64],
    params: &LossParams,
    weights: Option<&[f64]>,
    opts: &OptimOptions,
) -> OptimResult {
    let obj = |beta: &[f64]| corrected_objective(data, beta, params, weights);
    optim::minimize(obj, start, opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    /// Objective decrease from the naive start to the accepted minimizer.
    pub objective_decrease: f64,
    pub converged: bool,
    pub n_starts: usize,
}

#[derive(Debug, Clone)]
pub struct QuantileFit {
    pub beta: Vec<f64>,
    pub beta_naive: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

/// Corrected fit at one quantile level: minimize the corrected objective by
/// BFGS from the naive start, an optional warm start, and `n_restarts`
/// jittered starts (jitter scale 0.1 |beta_naive|, one derived stream per
/// restart). The best final objective wins; non-convergence is reported in
/// the diagnostics with the last iterate, never silently.
pub fn fit_quantile(
    data: &ObjectiveData,
    tau: f64,
    h: f64,
    sigma2: f64,
    n_restarts: usize,
    stream: &Stream,
    warm: Option<&[f64]>,
) -> Result<QuantileFit, EstimatorError> {
    let naive = naive_qr(&data.b_hat, &data.x, data.p, tau)?;
    let params = LossParams { tau, h, sigma2 };
    let opts = OptimOptions::default();

    let mut starts: Vec<Vec<f64>> = vec![naive.clone()];
    if let Some(w) = warm {
        starts.push(w.to_vec());
    }
    let scale = 0.1 * naive.iter().map(|v| v * v).sum::<f64>().sqrt();
    for r in 0..n_restarts {
        let mut s = stream.derive(r as u64);
        starts.push(naive.iter().map(|b| b + scale * s.standard_normal()).collect());
    }

    let mut best: Option<OptimResult> = None;
    for st in &starts {
        let r = minimize_corrected(data, st, &params, None, &opts);
        if best.as_ref().map_or(true, |b| r.value < b.value) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    let (f_naive, _) = corrected_objective(data, &naive, &params, None);
    let diagnostics = FitDiagnostics {
        iterations: best.iterations,
        grad_norm: best.grad_norm,
        objective: best.value,
        objective_decrease: f_naive - best.value,
        converged: best.converged,
        n_starts: starts.len(),
    };
    Ok(QuantileFit { beta: best.x, beta_naive: naive, diagnostics })
}

/// Full per-grid fit results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileFitResult {
    pub tau_grid: Vec<f64>,
    pub coef_names: Vec<String>,
    /// One row per tau, each of length p.
    pub beta_naive: Vec<Vec<f64>>,
    pub beta_hat: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub objective_at_opt: Vec<f64>,
    pub diagnostics: Vec<FitDiagnostics>,
    pub h_used: f64,
    pub sigma2_used: f64,
}

/// Everything downstream consumers need alongside the fit: the stage-one
/// artifacts and the assembled objective inputs.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub result: QuantileFitResult,
    pub stage1: StageOne,
    pub data: ObjectiveData,
    pub bandwidth_search: Option<BandwidthSearch>,
}

pub(crate) enum Sweep {
    Ascending,
    #[cfg_attr(not(test), allow(dead_code))]
    Descending,
}

pub(crate) fn fit_all_sweep(
    dataset: &LongitudinalDataset,
    config: &ModelConfig,
    sweep: Sweep,
) -> Result<FitOutput, EstimatorError> {
    config.validate()?;
    let stage1 = run_stage_one(dataset, config)?;
    let sigma2 = config.known_sigma2.unwrap_or(stage1.sigma2_hat);
    let data = ObjectiveData::from_stage_one(dataset, &stage1);
    let root = Stream::new(config.seed);

    let (h_used, bandwidth_search) = match &config.bandwidth {
        BandwidthSpec::Fixed(h) => (*h, None),
        BandwidthSpec::Auto { grid, n_c } => {
            let tau_mid = config.tau_grid[config.tau_grid.len() / 2];
            let search = bandwidth::select_bandwidth(
                &data,
                config.error_family,
                tau_mid,
                grid,
                *n_c,
                sigma2,
                config.n_restarts,
                &root.derive(domain::BANDWIDTH),
            )?;
            (search.selected, Some(search))
        }
    };

    let n_tau = config.tau_grid.len();
    let order: Vec<usize> = match sweep {
        Sweep::Ascending => (0..n_tau).collect(),
        Sweep::Descending => (0..n_tau).rev().collect(),
    };
    let fit_root = root.derive(domain::FIT);
    let mut fits: Vec<Option<QuantileFit>> = vec![None; n_tau];
    let mut warm: Option<Vec<f64>> = None;
    for &ti in &order {
        let tau = config.tau_grid[ti];
        let stream = fit_root.derive(ti as u64);
        let fit = fit_quantile(
            &data,
            tau,
            h_used,
            sigma2,
            config.n_restarts,
            &stream,
            warm.as_deref(),
        )?;
        warm = Some(fit.beta.clone());
        fits[ti] = Some(fit);
    }

    let fits: Vec<QuantileFit> = fits.into_iter().map(|f| f.expect("all taus fitted")).collect();
    let result = QuantileFitResult {
        tau_grid: config.tau_grid.clone(),
        coef_names: dataset.covariate_names().to_vec(),
        beta_naive: fits.iter().map(|f| f.beta_naive.clone()).collect(),
        beta_hat: fits.iter().map(|f| f.beta.clone()).collect(),
        converged: fits.iter().map(|f| f.diagnostics.converged).collect(),
        objective_at_opt: fits.iter().map(|f| f.diagnostics.objective).collect(),
        diagnostics: fits.iter().map(|f| f.diagnostics.clone()).collect(),
        h_used,
        sigma2_used: sigma2,
    };
    Ok(FitOutput { result, stage1, data, bandwidth_search })
}

/// Run the whole stage-two pipeline: stage one, variance pooling, bandwidth
/// resolution, then one corrected fit per quantile level, sweeping the grid
/// in ascending order with warm starts. Deterministic given `config.seed`.
pub fn fit_all(
    dataset: &LongitudinalDataset,
    config: &ModelConfig,
) -> Result<FitOutput, EstimatorError> {
    fit_all_sweep(dataset, config, Sweep::Ascending)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn intercept_only_quantiles_follow_the_pinned_convention() {
        let x = vec![1.0; 3];
        let beta = naive_qr(&[1.0, 2.0, 3.0], &x, 1, 0.5).unwrap();
        assert_eq!(beta, vec![2.0]);

        let x = vec![1.0; 4];
        let beta = naive_qr(&[1.0, 2.0, 3.0, 4.0], &x, 1, 0.25).unwrap();
        assert_eq!(beta, vec![2.0]);
    }

    #[test]
    fn too_few_subjects_and_rank_deficiency_error() {
        let err = naive_qr(&[1.0, 2.0], &[1.0, 0.0, 1.0, 1.0], 2, 0.5).unwrap_err();
        assert!(matches!(err, EstimatorError::TooFewSubjects { .. }));

        // second column identical to the intercept
        let x = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let err = naive_qr(&[0.0, 1.0, 2.0, 3.0], &x, 2, 0.5).unwrap_err();
        assert!(matches!(err, EstimatorError::RankDeficient));
    }

    /// Brute-force oracle: the check-loss optimum over all exact-fit
    /// solutions through p points.
    fn oracle_objective(b: &[f64], x: &[f64], p: usize, tau: f64) -> f64 {
        let n = b.len();
        let mut best = f64::INFINITY;
        let mut subset: Vec<usize> = (0..p).collect();
        loop {
            if let Some(beta) = basic_solution(b, x, p, &subset) {
                best = best.min(check_objective(b, x, p, &beta, tau, None));
            }
            // next combination
            let mut i = p;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if subset[i] < n - (p - i) {
                    subset[i] += 1;
                    for j in i + 1..p {
                        subset[j] = subset[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn naive_matches_brute_force_oracle_small_instance() {
        let s = Stream::new(31).derive(0);
        let n = 6;
        let p = 2;
        for rep in 0..10 {
            let mut st = s.derive(rep);
            let x: Vec<f64> = (0..n).flat_map(|_| [1.0, st.normal(0.0, 1.0)]).collect();
            let b: Vec<f64> = (0..n).map(|_| st.normal(0.0, 2.0)).collect();
            for tau in [0.25, 0.5, 0.8] {
                let beta = naive_qr(&b, &x, p, tau).unwrap();
                let f = check_objective(&b, &x, p, &beta, tau, None);
                let f_star = oracle_objective(&b, &x, p, tau);
                assert!(
                    (f - f_star).abs() <= 1e-8,
                    "rep {rep} tau {tau}: {f} vs oracle {f_star}"
                );
            }
        }
    }

    fn synthetic_objective_data(n: usize, seed: u64) -> ObjectiveData {
        let mut s = Stream::new(seed).derive(99);
        let p = 3;
        let mut x = Vec::with_capacity(n * p);
        let mut b = Vec::with_capacity(n);
        let mut dis = Vec::with_capacity(n);
        for _ in 0..n {
            let x1 = s.uniform(0.0, 0.5);
            let x2 = if s.bernoulli(0.5) { 1.0 } else { 0.0 };
            x.extend_from_slice(&[1.0, x1, x2]);
            let e = s.standard_normal();
            b.push(2.0 + x1 + x2 + (0.1 + x1 + x2) * e + s.laplace(0.3));
            dis.push(1.0 / s.uniform(0.3, 0.9f64).sqrt());
        }
        ObjectiveData::from_raw(x, b, dis, p)
    }

    #[test]
    fn corrected_fit_reaches_tight_gradient_norm() {
        let data = synthetic_objective_data(800, 5);
        let stream = Stream::new(1).derive(domain::FIT);
        let fit = fit_quantile(&data, 0.5, 0.8, 0.0, 2, &stream, None).unwrap();
        assert!(fit.diagnostics.converged);
        assert!(
            fit.diagnostics.grad_norm
                < 1e-6 * (1.0 + fit.diagnostics.objective.abs()),
            "grad norm {}",
            fit.diagnostics.grad_norm
        );
    }

    #[test]
    fn zero_sigma2_and_small_h_recovers_naive() {
        let data = synthetic_objective_data(500, 8);
        let stream = Stream::new(2).derive(domain::FIT);
        let fit = fit_quantile(&data, 0.5, 0.02, 0.0, 3, &stream, None).unwrap();
        let dist: f64 = fit
            .beta
            .iter()
            .zip(&fit.beta_naive)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 0.05, "corrected {:?} vs naive {:?}", fit.beta, fit.beta_naive);
    }

    #[test]
    fn duplicated_data_leaves_the_minimizer_unchanged() {
        let data = synthetic_objective_data(300, 13);
        let x2: Vec<f64> = data.x.iter().chain(data.x.iter()).copied().collect();
        let b2: Vec<f64> = data.b_hat.iter().chain(data.b_hat.iter()).copied().collect();
        let d2: Vec<f64> =
            data.d_inv_sqrt.iter().chain(data.d_inv_sqrt.iter()).copied().collect();
        let doubled = ObjectiveData::from_raw(x2, b2, d2, data.p);
        let stream = Stream::new(3).derive(domain::FIT);
        let f1 = fit_quantile(&data, 0.3, 0.8, 0.4, 3, &stream, None).unwrap();
        let f2 = fit_quantile(&doubled, 0.3, 0.8, 0.4, 3, &stream, None).unwrap();
        for (a, b) in f1.beta.iter().zip(&f2.beta) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn sweep_direction_does_not_change_the_fit() {
        let generated =
            crate::simgen::generate(&crate::simgen::SimScenario {
                case: crate::simgen::ScenarioCase::Case1,
                n: 500,
                seed: 15,
            });
        let config = crate::simgen::base_config(
            crate::simgen::ScenarioCase::Case1,
            vec![0.25, 0.4, 0.55, 0.7],
            33,
        );
        let up = fit_all_sweep(&generated.dataset, &config, Sweep::Ascending).unwrap();
        let down = fit_all_sweep(&generated.dataset, &config, Sweep::Descending).unwrap();
        for (a, b) in up.result.beta_hat.iter().zip(&down.result.beta_hat) {
            for (x, y) in a.iter().zip(b) {
                assert_relative_eq!(x, y, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn single_tau_grid_reduces_to_fit_quantile() {
        let generated = crate::simgen::generate(&crate::simgen::SimScenario {
            case: crate::simgen::ScenarioCase::Case1,
            n: 150,
            seed: 2,
        });
        let config =
            crate::simgen::base_config(crate::simgen::ScenarioCase::Case1, vec![0.5], 11)
                .with_restarts(2);
        let out = fit_all(&generated.dataset, &config).unwrap();
        let stream = Stream::new(config.seed).derive(domain::FIT).derive(0);
        let direct = fit_quantile(&out.data, 0.5, 0.8, out.result.sigma2_used, 2, &stream, None)
            .unwrap();
        assert_eq!(out.result.beta_hat[0], direct.beta);
        assert_eq!(out.result.beta_naive[0], direct.beta_naive);
    }

    #[test]
    fn subject_order_permutation_is_bit_identical() {
        let generated = crate::simgen::generate(&crate::simgen::SimScenario {
            case: crate::simgen::ScenarioCase::Case3,
            n: 120,
            seed: 29,
        });
        let mut shuffled: Vec<_> = generated.dataset.subjects().to_vec();
        shuffled.reverse();
        shuffled.swap(3, 77);
        let permuted = crate::data::LongitudinalDataset::new(shuffled)
            .unwrap()
            .with_covariate_names(generated.dataset.covariate_names().to_vec())
            .unwrap();
        let config = crate::simgen::base_config(
            crate::simgen::ScenarioCase::Case3,
            vec![0.3, 0.6],
            5,
        )
        .with_restarts(1);
        let a = fit_all(&generated.dataset, &config).unwrap();
        let b = fit_all(&permuted, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&a.result).unwrap(),
            serde_json::to_string(&b.result).unwrap()
        );
        assert_eq!(a.stage1.sigma2_hat.to_bits(), b.stage1.sigma2_hat.to_bits());
    }

    proptest::proptest! {
        /// Intercept-only quantile regression: the pinned order statistic
        /// actually minimizes the exact check loss over the sample (every
        /// minimizer of the intercept-only problem sits at a data point).
        #[test]
        fn intercept_only_convention_minimizes_check_loss(
            values in proptest::collection::vec(-100.0f64..100.0, 1..40),
            tau in 0.01f64..0.99,
        ) {
            let n = values.len();
            let x = vec![1.0; n];
            let beta = naive_qr(&values, &x, 1, tau);
            proptest::prop_assume!(n > 1);
            let beta = beta.unwrap()[0];
            let f = check_objective(&values, &x, 1, &[beta], tau, None);
            for cand in &values {
                let fc = check_objective(&values, &x, 1, &[*cand], tau, None);
                proptest::prop_assert!(f <= fc + 1e-9 * (1.0 + fc.abs()));
            }
        }
    }

    #[test]
    fn weighted_objective_rescaling_leaves_argmin_unchanged() {
        let data = synthetic_objective_data(400, 21);
        let params = LossParams { tau: 0.4, h: 0.8, sigma2: 0.3 };
        let start = naive_qr(&data.b_hat, &data.x, data.p, 0.4).unwrap();
        let mut s = Stream::new(17).derive(1);
        let w: Vec<f64> = (0..data.n).map(|_| s.exponential(1.0)).collect();
        let w10: Vec<f64> = w.iter().map(|v| 10.0 * v).collect();
        let opts = OptimOptions::default();
        let r1 = minimize_corrected(&data, &start, &params, Some(&w), &opts);
        let r2 = minimize_corrected(&data, &start, &params, Some(&w10), &opts);
        for (a, b) in r1.x.iter().zip(&r2.x) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }
}
