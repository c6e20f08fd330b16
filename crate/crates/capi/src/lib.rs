//! C ABI for the trajectory quantile regression library.
//!
//! Conventions: opaque handles behind pointers, `TrajqStatus` return codes,
//! caller-supplied output buffers, and a thread-local last-error message.
//! Every `*_free` accepts NULL. Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use trajq::data::{BandwidthSpec, ErrorFamily, LongitudinalDataset, ModelConfig};
use trajq::estimator::fit_all;
use trajq::inference::{resample_fit, ResampleDraws, ResampleOptions, WeightScheme};
use trajq::io::ingest_csv;
use trajq::rng::Stream;
use trajq::simgen::{generate, ScenarioCase, SimScenario};

/// Return codes. Anything other than `Ok` leaves a message retrievable via
/// `trajq_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajqStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    IoFailed = 4,
    FitFailed = 5,
    BufferTooSmall = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: impl std::fmt::Display) {
    let clean = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn fail(status: TrajqStatus, msg: impl std::fmt::Display) -> TrajqStatus {
    set_error(msg);
    status
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn trajq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn trajq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque dataset handle.
pub struct TrajqDataset {
    inner: LongitudinalDataset,
}

/// Opaque fit handle: point estimates, naive baseline, and resampling
/// summaries over the requested quantile grid.
pub struct TrajqFit {
    tau_grid: Vec<f64>,
    p: usize,
    beta_hat: Vec<Vec<f64>>,
    beta_naive: Vec<Vec<f64>>,
    converged: Vec<bool>,
    h_used: f64,
    sigma2_used: f64,
    coef_names: Vec<CString>,
    draws: Option<ResampleDraws>,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, TrajqStatus> {
    if ptr.is_null() {
        set_error(format!("{name} is NULL"));
        return Err(TrajqStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        TrajqStatus::InvalidUtf8
    })
}

/// Load a dataset from the two-file CSV layout.
///
/// # Safety
/// `long_path` and `cov_path` must be NUL-terminated strings; `out` must be
/// a valid pointer. On success `*out` owns the dataset and must be released
/// with `trajq_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn trajq_dataset_read_csv(
    long_path: *const c_char,
    cov_path: *const c_char,
    out: *mut *mut TrajqDataset,
) -> TrajqStatus {
    if out.is_null() {
        return fail(TrajqStatus::NullArgument, "out is NULL");
    }
    let long_path = match cstr_arg(long_path, "long_path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let cov_path = match cstr_arg(cov_path, "cov_path") {
        Ok(s) => s,
        Err(st) => return st,
    };
    match ingest_csv(Path::new(long_path), Path::new(cov_path)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(TrajqDataset { inner: ds }));
            TrajqStatus::Ok
        }
        Err(e) => fail(TrajqStatus::IoFailed, e),
    }
}

/// Generate a synthetic scenario dataset (see the CLI `simulate` command
/// for the scenario names).
///
/// # Safety
/// `case` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trajq_dataset_simulate(
    case: *const c_char,
    n: usize,
    seed: u64,
    out: *mut *mut TrajqDataset,
) -> TrajqStatus {
    if out.is_null() {
        return fail(TrajqStatus::NullArgument, "out is NULL");
    }
    let case = match cstr_arg(case, "case") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let case = match ScenarioCase::parse(case) {
        Ok(c) => c,
        Err(e) => return fail(TrajqStatus::InvalidArgument, e),
    };
    if n == 0 {
        return fail(TrajqStatus::InvalidArgument, "n must be at least 1");
    }
    let generated = generate(&SimScenario { case, n, seed });
    *out = Box::into_raw(Box::new(TrajqDataset { inner: generated.dataset }));
    TrajqStatus::Ok
}

/// # Safety
/// `ds` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn trajq_dataset_n_subjects(ds: *const TrajqDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.n()
}

/// Covariate dimension including the intercept.
///
/// # Safety
/// `ds` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn trajq_dataset_p(ds: *const TrajqDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    (*ds).inner.p()
}

/// # Safety
/// `ds` must be a handle from this library or NULL; it is invalid after.
#[no_mangle]
pub unsafe extern "C" fn trajq_dataset_free(ds: *mut TrajqDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fit options. `h > 0` fixes the bandwidth; `h <= 0` selects it
/// automatically on the default candidate grid. `n_b = 0` skips resampling
/// (no standard errors or intervals). `error_family`: 0 normal, 1 Laplace.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TrajqFitOptions {
    pub k: usize,
    pub t_star: f64,
    pub error_family: i32,
    pub h: f64,
    pub n_b: usize,
    pub alpha: f64,
    pub seed: u64,
    pub n_restarts: usize,
}

/// Defaults: linear trajectory, t* = 0, Laplace errors, h = 0.8, 200
/// resampling replicates at alpha = 0.05, seed 1, 5 restarts.
#[no_mangle]
pub extern "C" fn trajq_fit_options_default() -> TrajqFitOptions {
    TrajqFitOptions {
        k: 1,
        t_star: 0.0,
        error_family: 1,
        h: 0.8,
        n_b: 200,
        alpha: 0.05,
        seed: 1,
        n_restarts: 5,
    }
}

/// Run the full pipeline on a dataset at the given quantile levels.
///
/// # Safety
/// `ds`, `opts`, and `out` must be valid; `taus` must point to `n_tau`
/// doubles. On success `*out` must be released with `trajq_fit_free`.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit(
    ds: *const TrajqDataset,
    opts: *const TrajqFitOptions,
    taus: *const f64,
    n_tau: usize,
    out: *mut *mut TrajqFit,
) -> TrajqStatus {
    if ds.is_null() || opts.is_null() || taus.is_null() || out.is_null() {
        return fail(TrajqStatus::NullArgument, "ds, opts, taus, and out must be non-NULL");
    }
    if n_tau == 0 {
        return fail(TrajqStatus::InvalidArgument, "n_tau must be at least 1");
    }
    let opts = &*opts;
    let tau_grid = std::slice::from_raw_parts(taus, n_tau).to_vec();
    let family = match opts.error_family {
        0 => ErrorFamily::Normal,
        1 => ErrorFamily::Laplace,
        other => {
            return fail(
                TrajqStatus::InvalidArgument,
                format!("error_family must be 0 (normal) or 1 (laplace), got {other}"),
            )
        }
    };
    let bandwidth = if opts.h > 0.0 {
        BandwidthSpec::Fixed(opts.h)
    } else {
        BandwidthSpec::Auto { grid: (4..=16).map(|i| i as f64 * 0.1).collect(), n_c: 20 }
    };
    let config = match ModelConfig::new(opts.k, opts.t_star, family, tau_grid, bandwidth, opts.seed)
    {
        Ok(c) => c.with_restarts(opts.n_restarts),
        Err(e) => return fail(TrajqStatus::InvalidArgument, e),
    };
    let dataset = &(*ds).inner;
    let fit = match fit_all(dataset, &config) {
        Ok(f) => f,
        Err(e) => return fail(TrajqStatus::FitFailed, e),
    };
    let draws = if opts.n_b > 0 {
        let r = resample_fit(
            &fit.data,
            &fit.stage1,
            config.known_sigma2,
            &fit.result.beta_hat,
            None,
            &config.tau_grid,
            fit.result.h_used,
            &ResampleOptions {
                n_b: opts.n_b,
                alpha: opts.alpha,
                weights: WeightScheme::Exponential,
            },
            &Stream::new(opts.seed),
        );
        match r {
            Ok(d) => Some(d),
            Err(e) => return fail(TrajqStatus::FitFailed, e),
        }
    } else {
        None
    };
    let coef_names = fit
        .result
        .coef_names
        .iter()
        .map(|n| CString::new(n.as_str()).unwrap_or_default())
        .collect();
    *out = Box::into_raw(Box::new(TrajqFit {
        tau_grid: fit.result.tau_grid,
        p: dataset.p(),
        beta_hat: fit.result.beta_hat,
        beta_naive: fit.result.beta_naive,
        converged: fit.result.converged,
        h_used: fit.result.h_used,
        sigma2_used: fit.result.sigma2_used,
        coef_names,
        draws,
    }));
    TrajqStatus::Ok
}

/// # Safety
/// `fit` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_n_tau(fit: *const TrajqFit) -> usize {
    if fit.is_null() {
        return 0;
    }
    (*fit).tau_grid.len()
}

/// # Safety
/// `fit` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_p(fit: *const TrajqFit) -> usize {
    if fit.is_null() {
        return 0;
    }
    (*fit).p
}

/// # Safety
/// `fit` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_h(fit: *const TrajqFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    (*fit).h_used
}

/// # Safety
/// `fit` must be a handle from this library or NULL.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_sigma2(fit: *const TrajqFit) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    (*fit).sigma2_used
}

/// Whether the optimizer converged at quantile index `tau_idx` (1) or not (0).
///
/// # Safety
/// `fit` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_converged(fit: *const TrajqFit, tau_idx: usize) -> i32 {
    if fit.is_null() {
        return 0;
    }
    let fit = &*fit;
    if tau_idx >= fit.converged.len() {
        return 0;
    }
    fit.converged[tau_idx] as i32
}

/// Name of coefficient `coef_idx`; owned by the handle, do not free.
///
/// # Safety
/// `fit` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_coef_name(
    fit: *const TrajqFit,
    coef_idx: usize,
) -> *const c_char {
    if fit.is_null() {
        return ptr::null();
    }
    let fit = &*fit;
    if coef_idx >= fit.coef_names.len() {
        return ptr::null();
    }
    fit.coef_names[coef_idx].as_ptr()
}

unsafe fn copy_row(
    row: Option<&[f64]>,
    buf: *mut f64,
    len: usize,
    what: &str,
) -> TrajqStatus {
    let Some(row) = row else {
        return fail(TrajqStatus::InvalidArgument, format!("{what}: index out of range"));
    };
    if buf.is_null() {
        return fail(TrajqStatus::NullArgument, format!("{what}: buffer is NULL"));
    }
    if len < row.len() {
        return fail(
            TrajqStatus::BufferTooSmall,
            format!("{what}: buffer holds {len}, need {}", row.len()),
        );
    }
    ptr::copy_nonoverlapping(row.as_ptr(), buf, row.len());
    TrajqStatus::Ok
}

/// Copy the corrected estimate at quantile index `tau_idx` into `buf`
/// (needs `trajq_fit_p` doubles).
///
/// # Safety
/// `fit` must be a valid handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_beta(
    fit: *const TrajqFit,
    tau_idx: usize,
    buf: *mut f64,
    len: usize,
) -> TrajqStatus {
    if fit.is_null() {
        return fail(TrajqStatus::NullArgument, "fit is NULL");
    }
    let fit = &*fit;
    copy_row(fit.beta_hat.get(tau_idx).map(Vec::as_slice), buf, len, "beta")
}

/// Copy the naive baseline estimate at quantile index `tau_idx` into `buf`.
///
/// # Safety
/// `fit` must be a valid handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_beta_naive(
    fit: *const TrajqFit,
    tau_idx: usize,
    buf: *mut f64,
    len: usize,
) -> TrajqStatus {
    if fit.is_null() {
        return fail(TrajqStatus::NullArgument, "fit is NULL");
    }
    let fit = &*fit;
    copy_row(fit.beta_naive.get(tau_idx).map(Vec::as_slice), buf, len, "beta_naive")
}

/// Copy resampling standard errors at quantile index `tau_idx` into `buf`.
/// Fails with `InvalidArgument` when the fit ran with `n_b = 0`.
///
/// # Safety
/// `fit` must be a valid handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_se(
    fit: *const TrajqFit,
    tau_idx: usize,
    buf: *mut f64,
    len: usize,
) -> TrajqStatus {
    if fit.is_null() {
        return fail(TrajqStatus::NullArgument, "fit is NULL");
    }
    match &(*fit).draws {
        Some(d) => copy_row(d.se.get(tau_idx).map(Vec::as_slice), buf, len, "se"),
        None => fail(TrajqStatus::InvalidArgument, "fit ran without resampling (n_b = 0)"),
    }
}

/// Copy the normal-approximation confidence bounds at `tau_idx`.
///
/// # Safety
/// `fit` must be a valid handle; both buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_ci(
    fit: *const TrajqFit,
    tau_idx: usize,
    lower: *mut f64,
    upper: *mut f64,
    len: usize,
) -> TrajqStatus {
    if fit.is_null() {
        return fail(TrajqStatus::NullArgument, "fit is NULL");
    }
    match &(*fit).draws {
        Some(d) => {
            let st = copy_row(d.ci_lower.get(tau_idx).map(Vec::as_slice), lower, len, "ci lower");
            if st != TrajqStatus::Ok {
                return st;
            }
            copy_row(d.ci_upper.get(tau_idx).map(Vec::as_slice), upper, len, "ci upper")
        }
        None => fail(TrajqStatus::InvalidArgument, "fit ran without resampling (n_b = 0)"),
    }
}

/// # Safety
/// `fit` must be a handle from this library or NULL; it is invalid after.
#[no_mangle]
pub unsafe extern "C" fn trajq_fit_free(fit: *mut TrajqFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}
