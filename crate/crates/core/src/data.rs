//! Dataset and model-configuration types.
//!
//! A [`LongitudinalDataset`] is a collection of per-subject repeated
//! measures plus a subject-level covariate vector. Construction validates
//! every invariant once and canonicalizes subject order (sorted by id), so
//! downstream computations are deterministic regardless of input order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("subject `{id}`: times and outcomes have different lengths ({times} vs {y})")]
    LengthMismatch { id: String, times: usize, y: usize },
    #[error("subject `{id}`: must have at least one observation")]
    NoObservations { id: String },
    #[error("subject `{id}`: observation times must be strictly increasing")]
    NonIncreasingTimes { id: String },
    #[error("subject `{id}`: non-finite time, outcome, or covariate value")]
    NonFinite { id: String },
    #[error("subject `{id}`: covariate vector has length {got}, expected {expected}")]
    CovariateLength { id: String, got: usize, expected: usize },
    #[error("subject `{id}`: covariate vector must start with the intercept entry 1")]
    MissingIntercept { id: String },
    #[error("subject `{id}`: delta must be positive and finite, got {delta}")]
    BadDelta { id: String, delta: f64 },
    #[error("duplicate subject id `{id}`")]
    DuplicateId { id: String },
    #[error("dataset has no subjects")]
    Empty,
    #[error("tau grid must be strictly increasing inside (0, 1)")]
    BadTauGrid,
    #[error("bandwidth values must be positive and finite")]
    BadBandwidth,
    #[error("bandwidth grid must hold at least two candidates")]
    BandwidthGridTooSmall,
    #[error("t_star must be finite")]
    BadTStar,
    #[error("known sigma2 must be nonnegative and finite")]
    BadSigma2,
    #[error("expected {expected} covariate names, got {got}")]
    CovariateNameCount { expected: usize, got: usize },
}

/// Repeated measures and covariates for one subject.
///
/// `delta` is the known positive per-subject scale of the trajectory-error
/// variance; datasets without heteroscedastic errors use 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub delta: f64,
}

impl SubjectRecord {
    pub fn m(&self) -> usize {
        self.times.len()
    }

    fn validate(&self, p: usize) -> Result<(), DataError> {
        let id = || self.id.clone();
        if self.times.is_empty() {
            return Err(DataError::NoObservations { id: id() });
        }
        if self.times.len() != self.y.len() {
            return Err(DataError::LengthMismatch {
                id: id(),
                times: self.times.len(),
                y: self.y.len(),
            });
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(DataError::NonIncreasingTimes { id: id() });
        }
        let finite = self.times.iter().chain(&self.y).chain(&self.x).all(|v| v.is_finite());
        if !finite {
            return Err(DataError::NonFinite { id: id() });
        }
        if self.x.len() != p {
            return Err(DataError::CovariateLength {
                id: id(),
                got: self.x.len(),
                expected: p,
            });
        }
        if self.x[0] != 1.0 {
            return Err(DataError::MissingIntercept { id: id() });
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(DataError::BadDelta { id: id(), delta: self.delta });
        }
        Ok(())
    }
}

/// Validated long-format repeated-measures dataset, subjects in canonical
/// (id-sorted) order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectRecord>,
    p: usize,
    covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(mut subjects: Vec<SubjectRecord>) -> Result<Self, DataError> {
        let first = subjects.first().ok_or(DataError::Empty)?;
        let p = first.x.len();
        subjects.sort_by(|a, b| a.id.cmp(&b.id));
        for w in subjects.windows(2) {
            if w[0].id == w[1].id {
                return Err(DataError::DuplicateId { id: w[0].id.clone() });
            }
        }
        for s in &subjects {
            s.validate(p)?;
        }
        let mut covariate_names = vec!["intercept".to_string()];
        covariate_names.extend((1..p).map(|j| format!("x{j}")));
        Ok(LongitudinalDataset { subjects, p, covariate_names })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != self.p {
            return Err(DataError::CovariateNameCount { expected: self.p, got: names.len() });
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Covariate dimension including the intercept.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.m()).sum()
    }
}

/// Distribution family assumed for the trajectory errors. The corrected
/// loss is identical for both; the family matters for simulated noise in
/// bandwidth selection and data generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorFamily {
    Normal,
    Laplace,
}

impl std::str::FromStr for ErrorFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(ErrorFamily::Normal),
            "laplace" => Ok(ErrorFamily::Laplace),
            other => Err(format!("unknown error family `{other}` (expected normal|laplace)")),
        }
    }
}

/// Smoothing-bandwidth policy: a fixed value or automatic selection over a
/// candidate grid with `n_c` simulation replicates per candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BandwidthSpec {
    Fixed(f64),
    Auto { grid: Vec<f64>, n_c: usize },
}

/// Full model configuration for a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Polynomial order of the trajectory model.
    pub k: usize,
    /// Time point at which the trajectory changing rate is evaluated.
    pub t_star: f64,
    pub error_family: ErrorFamily,
    pub tau_grid: Vec<f64>,
    pub bandwidth: BandwidthSpec,
    pub seed: u64,
    /// When supplied, the error variance is treated as known: stage one
    /// still reports its estimate, but estimation and resampling use this
    /// value directly.
    pub known_sigma2: Option<f64>,
    /// Jittered optimizer restarts per quantile level.
    pub n_restarts: usize,
}

impl ModelConfig {
    pub fn new(
        k: usize,
        t_star: f64,
        error_family: ErrorFamily,
        tau_grid: Vec<f64>,
        bandwidth: BandwidthSpec,
        seed: u64,
    ) -> Result<Self, DataError> {
        let cfg = ModelConfig {
            k,
            t_star,
            error_family,
            tau_grid,
            bandwidth,
            seed,
            known_sigma2: None,
            n_restarts: 5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_known_sigma2(mut self, sigma2: f64) -> Result<Self, DataError> {
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(DataError::BadSigma2);
        }
        self.known_sigma2 = Some(sigma2);
        Ok(self)
    }

    pub fn with_restarts(mut self, n: usize) -> Self {
        self.n_restarts = n;
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !self.t_star.is_finite() {
            return Err(DataError::BadTStar);
        }
        if self.tau_grid.is_empty()
            || self.tau_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.tau_grid.windows(2).any(|w| !(w[0] < w[1]))
        {
            return Err(DataError::BadTauGrid);
        }
        match &self.bandwidth {
            BandwidthSpec::Fixed(h) => {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(DataError::BadBandwidth);
                }
            }
            BandwidthSpec::Auto { grid, .. } => {
                if grid.len() < 2 {
                    return Err(DataError::BandwidthGridTooSmall);
                }
                if grid.iter().any(|h| !(*h > 0.0 && h.is_finite()))
                    || grid.windows(2).any(|w| !(w[0] < w[1]))
                {
                    return Err(DataError::BadBandwidth);
                }
            }
        }
        if let Some(s2) = self.known_sigma2 {
            if !(s2 >= 0.0 && s2.is_finite()) {
                return Err(DataError::BadSigma2);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, times: &[f64], y: &[f64], x: &[f64]) -> SubjectRecord {
        SubjectRecord {
            id: id.to_string(),
            times: times.to_vec(),
            y: y.to_vec(),
            x: x.to_vec(),
            delta: 1.0,
        }
    }

    #[test]
    fn canonical_order_is_sorted_by_id() {
        let ds = LongitudinalDataset::new(vec![
            subject("b", &[0.0, 1.0], &[1.0, 2.0], &[1.0, 0.5]),
            subject("a", &[0.0], &[3.0], &[1.0, 0.2]),
        ])
        .unwrap();
        let ids: Vec<&str> = ds.subjects().iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.total_observations(), 3);
    }

    #[test]
    fn rejects_bad_subjects() {
        let err = LongitudinalDataset::new(vec![subject("a", &[0.0, 0.0], &[1.0, 2.0], &[1.0])])
            .unwrap_err();
        assert!(matches!(err, DataError::NonIncreasingTimes { .. }));

        let err = LongitudinalDataset::new(vec![subject("a", &[0.0], &[1.0], &[0.5])]).unwrap_err();
        assert!(matches!(err, DataError::MissingIntercept { .. }));

        let mut s = subject("a", &[0.0], &[1.0], &[1.0]);
        s.delta = 0.0;
        let err = LongitudinalDataset::new(vec![s]).unwrap_err();
        assert!(matches!(err, DataError::BadDelta { .. }));

        let err = LongitudinalDataset::new(vec![
            subject("a", &[0.0], &[1.0], &[1.0]),
            subject("a", &[1.0], &[1.0], &[1.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, DataError::DuplicateId { .. }));
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::new(
            1,
            0.0,
            ErrorFamily::Laplace,
            vec![0.1, 0.5, 0.9],
            BandwidthSpec::Fixed(0.8),
            1,
        );
        assert!(ok.is_ok());

        let bad_grid = ModelConfig::new(
            1,
            0.0,
            ErrorFamily::Laplace,
            vec![0.5, 0.5],
            BandwidthSpec::Fixed(0.8),
            1,
        );
        assert!(bad_grid.is_err());

        let bad_h = ModelConfig::new(
            1,
            0.0,
            ErrorFamily::Laplace,
            vec![0.5],
            BandwidthSpec::Fixed(0.0),
            1,
        );
        assert!(bad_h.is_err());

        let bad_auto = ModelConfig::new(
            1,
            0.0,
            ErrorFamily::Laplace,
            vec![0.5],
            BandwidthSpec::Auto { grid: vec![0.8], n_c: 10 },
            1,
        );
        assert!(bad_auto.is_err());
    }
}
