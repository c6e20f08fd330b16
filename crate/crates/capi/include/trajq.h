#ifndef TRAJQ_H
#define TRAJQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Return codes. Anything other than `Ok` leaves a message retrievable via
 * `trajq_last_error_message`.
 */
typedef enum TrajqStatus {
  TrajqStatus_Ok = 0,
  TrajqStatus_NullArgument = 1,
  TrajqStatus_InvalidUtf8 = 2,
  TrajqStatus_InvalidArgument = 3,
  TrajqStatus_IoFailed = 4,
  TrajqStatus_FitFailed = 5,
  TrajqStatus_BufferTooSmall = 6,
} TrajqStatus;

/**
 * Opaque dataset handle.
 */
typedef struct TrajqDataset TrajqDataset;

/**
 * Opaque fit handle: point estimates, naive baseline, and resampling
 * summaries over the requested quantile grid.
 */
typedef struct TrajqFit TrajqFit;

/**
 * Fit options. `h > 0` fixes the bandwidth; `h <= 0` selects it
 * automatically on the default candidate grid. `n_b = 0` skips resampling
 * (no standard errors or intervals). `error_family`: 0 normal, 1 Laplace.
 */
typedef struct TrajqFitOptions {
  uintptr_t k;
  double t_star;
  int32_t error_family;
  double h;
  uintptr_t n_b;
  double alpha;
  uint64_t seed;
  uintptr_t n_restarts;
} TrajqFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call on the same thread; do not free.
 */
const char *trajq_last_error_message(void);

/**
 * Library version as a static string; do not free.
 */
const char *trajq_version(void);

/**
 * Load a dataset from the two-file CSV layout.
 *
 * # Safety
 * `long_path` and `cov_path` must be NUL-terminated strings; `out` must be
 * a valid pointer. On success `*out` owns the dataset and must be released
 * with `trajq_dataset_free`.
 */
enum TrajqStatus trajq_dataset_read_csv(const char *long_path,
                                        const char *cov_path,
                                        struct TrajqDataset **out);

/**
 * Generate a synthetic scenario dataset (see the CLI `simulate` command
 * for the scenario names).
 *
 * # Safety
 * `case` must be a NUL-terminated string and `out` a valid pointer.
 */
enum TrajqStatus trajq_dataset_simulate(const char *case_,
                                        uintptr_t n,
                                        uint64_t seed,
                                        struct TrajqDataset **out);

/**
 * # Safety
 * `ds` must be a handle from this library or NULL.
 */
uintptr_t trajq_dataset_n_subjects(const struct TrajqDataset *ds);

/**
 * Covariate dimension including the intercept.
 *
 * # Safety
 * `ds` must be a handle from this library or NULL.
 */
uintptr_t trajq_dataset_p(const struct TrajqDataset *ds);

/**
 * # Safety
 * `ds` must be a handle from this library or NULL; it is invalid after.
 */
void trajq_dataset_free(struct TrajqDataset *ds);

/**
 * Defaults: linear trajectory, t* = 0, Laplace errors, h = 0.8, 200
 * resampling replicates at alpha = 0.05, seed 1, 5 restarts.
 */
struct TrajqFitOptions trajq_fit_options_default(void);

/**
 * Run the full pipeline on a dataset at the given quantile levels.
 *
 * # Safety
 * `ds`, `opts`, and `out` must be valid; `taus` must point to `n_tau`
 * doubles. On success `*out` must be released with `trajq_fit_free`.
 */
enum TrajqStatus trajq_fit(const struct TrajqDataset *ds,
                           const struct TrajqFitOptions *opts,
                           const double *taus,
                           uintptr_t n_tau,
                           struct TrajqFit **out);

/**
 * # Safety
 * `fit` must be a handle from this library or NULL.
 */
uintptr_t trajq_fit_n_tau(const struct TrajqFit *fit);

/**
 * # Safety
 * `fit` must be a handle from this library or NULL.
 */
uintptr_t trajq_fit_p(const struct TrajqFit *fit);

/**
 * # Safety
 * `fit` must be a handle from this library or NULL.
 */
double trajq_fit_h(const struct TrajqFit *fit);

/**
 * # Safety
 * `fit` must be a handle from this library or NULL.
 */
double trajq_fit_sigma2(const struct TrajqFit *fit);

/**
 * Whether the optimizer converged at quantile index `tau_idx` (1) or not (0).
 *
 * # Safety
 * `fit` must be a valid handle.
 */
int32_t trajq_fit_converged(const struct TrajqFit *fit, uintptr_t tau_idx);

/**
 * Name of coefficient `coef_idx`; owned by the handle, do not free.
 *
 * # Safety
 * `fit` must be a valid handle.
 */
const char *trajq_fit_coef_name(const struct TrajqFit *fit, uintptr_t coef_idx);

/**
 * Copy the corrected estimate at quantile index `tau_idx` into `buf`
 * (needs `trajq_fit_p` doubles).
 *
 * # Safety
 * `fit` must be a valid handle; `buf` must hold `len` doubles.
 */
enum TrajqStatus trajq_fit_beta(const struct TrajqFit *fit,
                                uintptr_t tau_idx,
                                double *buf,
                                uintptr_t len);

/**
 * Copy the naive baseline estimate at quantile index `tau_idx` into `buf`.
 *
 * # Safety
 * `fit` must be a valid handle; `buf` must hold `len` doubles.
 */
enum TrajqStatus trajq_fit_beta_naive(const struct TrajqFit *fit,
                                      uintptr_t tau_idx,
                                      double *buf,
                                      uintptr_t len);

/**
 * Copy resampling standard errors at quantile index `tau_idx` into `buf`.
 * Fails with `InvalidArgument` when the fit ran with `n_b = 0`.
 *
 * # Safety
 * `fit` must be a valid handle; `buf` must hold `len` doubles.
 */
enum TrajqStatus trajq_fit_se(const struct TrajqFit *fit,
                              uintptr_t tau_idx,
                              double *buf,
                              uintptr_t len);

/**
 * Copy the normal-approximation confidence bounds at `tau_idx`.
 *
 * # Safety
 * `fit` must be a valid handle; both buffers must hold `len` doubles.
 */
enum TrajqStatus trajq_fit_ci(const struct TrajqFit *fit,
                              uintptr_t tau_idx,
                              double *lower,
                              double *upper,
                              uintptr_t len);

/**
 * # Safety
 * `fit` must be a handle from this library or NULL; it is invalid after.
 */
void trajq_fit_free(struct TrajqFit *fit);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TRAJQ_H */
