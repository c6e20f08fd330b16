//! Quantile regression of latent longitudinal trajectory features.
//!
//! The library is organized around a two-level model: a per-subject
//! polynomial trajectory fitted by least squares (stage one), and a
//! quantile regression of a latent trajectory feature — the changing
//! rate of the trajectory at a fixed time point — on subject-level
//! covariates (stage two). Because the feature is only available as a
//! noisy least-squares proxy, stage two minimizes a bias-corrected
//! smoothed check loss instead of the ordinary check loss.
//!
//! Modules:
//! - [`data`]: datasets, subject records, and model configuration.
//! - [`stage1`]: design matrices, per-subject fits, pooled error variance.
//! - [`loss`]: check loss, smoothed check loss, corrected loss, objective
//!   assembly with analytic gradients.
//! - [`estimator`]: naive quantile regression baseline and the corrected
//!   estimator across a quantile grid.
//! - [`bandwidth`]: simulation-extrapolation selection of the smoothing
//!   bandwidth.
//! - [`inference`]: wild-weight resampling variance estimation, confidence
//!   intervals, constancy test, average-effect summaries.
//! - [`simgen`]: synthetic-data scenarios and the replication harness.
//! - [`io`]: CSV ingestion, result tables, run manifests, draw sidecars.
//! - [`rng`]: deterministic splittable random number streams.

pub mod bandwidth;
pub mod data;
pub mod estimator;
pub mod inference;
pub mod io;
pub mod loss;
pub mod optim;
pub mod rng;
pub mod simgen;
pub mod stage1;

pub use data::{BandwidthSpec, ErrorFamily, LongitudinalDataset, ModelConfig, SubjectRecord};
pub use estimator::{fit_all, FitOutput, QuantileFitResult};
pub use inference::{resample_fit, ResampleDraws};
pub use simgen::{ReplicationReport, ScenarioCase, SimScenario};
pub use stage1::StageOne;
