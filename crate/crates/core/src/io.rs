//! Dataset ingestion and result serialization.
//!
//! Numeric output uses 17 significant digits everywhere, so every table
//! round-trips to the exact binary double and downstream plotting is
//! lossless. All tables have a fixed column set and order; see the writer
//! functions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bandwidth::BandwidthSearch;
use crate::data::{DataError, LongitudinalDataset, ModelConfig, SubjectRecord};
use crate::estimator::QuantileFitResult;
use crate::inference::{ConstancyTestResult, ResampleDraws};
use crate::simgen::{HiddenTruth, ReplicationReport};
use crate::stage1::StageOne;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: malformed header: expected columns {expected}, got {got}")]
    MalformedHeader { path: String, expected: String, got: String },
    #[error("{path} row {row}, column `{column}`: cannot parse `{value}` as a number")]
    BadNumber { path: String, row: usize, column: String, value: String },
    #[error("{path} row {row}, column `{column}`: non-finite value")]
    NonFinite { path: String, row: usize, column: String },
    #[error("{path} row {row}: delta must be positive, got {value}")]
    BadDeltaRow { path: String, row: usize, value: f64 },
    #[error("subject `{subject}`: duplicate (subject, time) pair at time {time}")]
    DuplicateTime { subject: String, time: f64 },
    #[error("{path} row {row}: duplicate covariate row for subject `{subject}`")]
    DuplicateCovariateRow { path: String, row: usize, subject: String },
    #[error("subjects present in {present} but missing from {missing}: {ids:?}")]
    UnmatchedSubjects { present: String, missing: String, ids: Vec<String> },
    #[error("{path}: draws sidecar is corrupt: {reason}")]
    Sidecar { path: String, reason: String },
    #[error("{path} line {line}: {message}")]
    ConfigFile { path: String, line: usize, message: String },
}

/// Full round-trip float formatting (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv|json)")),
        }
    }
}

impl OutputFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// Parse a grid specification: either `start:end:step` (inclusive) or a
/// comma-separated list.
pub fn parse_grid_spec(spec: &str) -> Result<Vec<f64>, String> {
    let parse_one =
        |s: &str| s.trim().parse::<f64>().map_err(|_| format!("cannot parse `{s}` as a number"));
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("grid spec `{spec}` must be start:end:step"));
        }
        let (start, end, step) = (parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?);
        if !(step > 0.0) || end < start {
            return Err(format!("grid spec `{spec}` needs end >= start and step > 0"));
        }
        let count = ((end - start) / step + 0.5).floor() as usize + 1;
        Ok((0..count).map(|i| start + i as f64 * step).collect())
    } else {
        spec.split(',').map(parse_one).collect()
    }
}

fn header_set(headers: &csv::StringRecord) -> Vec<String> {
    headers.iter().map(|h| h.trim().to_string()).collect()
}

/// Ingest the two-file CSV layout: a long file with columns
/// `subject_id,time,y` and a covariate file with `subject_id,<names...>`
/// plus an optional `delta` column. Values are joined on subject id, the
/// intercept is prepended, and out-of-order times are sorted with a warning
/// (duplicated times are an error).
pub fn ingest_csv(
    long_path: &Path,
    cov_path: &Path,
) -> Result<LongitudinalDataset, IoError> {
    let lp = long_path.display().to_string();
    let mut rdr = csv::Reader::from_path(long_path)?;
    let headers = header_set(rdr.headers()?);
    let want = ["subject_id", "time", "y"];
    if headers.len() != 3 || !want.iter().all(|w| headers.iter().any(|h| h == w)) {
        return Err(IoError::MalformedHeader {
            path: lp,
            expected: want.join(","),
            got: headers.join(","),
        });
    }
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (ci, ct, cy) = (col("subject_id"), col("time"), col("y"));

    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 2; // 1-based with header
        let id = rec.get(ci).unwrap_or("").trim().to_string();
        let parse = |c: usize, name: &str| -> Result<f64, IoError> {
            let raw = rec.get(c).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| IoError::BadNumber {
                path: lp.clone(),
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(IoError::NonFinite { path: lp.clone(), row, column: name.to_string() });
            }
            Ok(v)
        };
        let t = parse(ct, "time")?;
        let y = parse(cy, "y")?;
        series.entry(id).or_default().push((t, y));
    }

    let cp = cov_path.display().to_string();
    let mut rdr = csv::Reader::from_path(cov_path)?;
    let headers = header_set(rdr.headers()?);
    if headers.first().map(String::as_str) != Some("subject_id") || headers.len() < 2 {
        return Err(IoError::MalformedHeader {
            path: cp,
            expected: "subject_id,<x1>,...[,delta]".to_string(),
            got: headers.join(","),
        });
    }
    let delta_col = headers.iter().position(|h| h == "delta");
    let cov_cols: Vec<usize> =
        (1..headers.len()).filter(|c| Some(*c) != delta_col).collect();
    let cov_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut covs: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = idx + 2;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if covs.contains_key(&id) {
            return Err(IoError::DuplicateCovariateRow { path: cp.clone(), row, subject: id });
        }
        let parse = |c: usize| -> Result<f64, IoError> {
            let raw = rec.get(c).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| IoError::BadNumber {
                path: cp.clone(),
                row,
                column: headers[c].clone(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(IoError::NonFinite {
                    path: cp.clone(),
                    row,
                    column: headers[c].clone(),
                });
            }
            Ok(v)
        };
        let mut x = Vec::with_capacity(cov_cols.len());
        for &c in &cov_cols {
            x.push(parse(c)?);
        }
        let delta = match delta_col {
            Some(c) => {
                let d = parse(c)?;
                if !(d > 0.0) {
                    return Err(IoError::BadDeltaRow { path: cp.clone(), row, value: d });
                }
                d
            }
            None => 1.0,
        };
        covs.insert(id, (x, delta));
    }

    let only_long: Vec<String> =
        series.keys().filter(|id| !covs.contains_key(*id)).cloned().collect();
    if !only_long.is_empty() {
        return Err(IoError::UnmatchedSubjects {
            present: lp,
            missing: cp,
            ids: only_long,
        });
    }
    let only_cov: Vec<String> =
        covs.keys().filter(|id| !series.contains_key(*id)).cloned().collect();
    if !only_cov.is_empty() {
        return Err(IoError::UnmatchedSubjects {
            present: cp,
            missing: lp,
            ids: only_cov,
        });
    }

    let mut subjects = Vec::with_capacity(series.len());
    for (id, mut obs) in series {
        let sorted = obs.windows(2).all(|w| w[0].0 < w[1].0);
        if !sorted {
            obs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in obs.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(IoError::DuplicateTime { subject: id, time: w[0].0 });
                }
            }
            log::warn!("subject `{id}`: observation times were out of order; sorted");
        } else {
            for w in obs.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(IoError::DuplicateTime { subject: id, time: w[0].0 });
                }
            }
        }
        let (xcov, delta) = covs.remove(&id).expect("join checked above");
        let mut x = Vec::with_capacity(xcov.len() + 1);
        x.push(1.0);
        x.extend_from_slice(&xcov);
        subjects.push(SubjectRecord {
            id,
            times: obs.iter().map(|o| o.0).collect(),
            y: obs.iter().map(|o| o.1).collect(),
            x,
            delta,
        });
    }

    let mut names = vec!["intercept".to_string()];
    names.extend(cov_names);
    Ok(LongitudinalDataset::new(subjects)?.with_covariate_names(names)?)
}

/// Write a dataset back to the two-file CSV layout (canonical subject
/// order, full round-trip precision, delta column always present).
pub fn write_dataset_csv(
    dataset: &LongitudinalDataset,
    long_path: &Path,
    cov_path: &Path,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(long_path)?;
    w.write_record(["subject_id", "time", "y"])?;
    for s in dataset.subjects() {
        for (t, y) in s.times.iter().zip(&s.y) {
            w.write_record([s.id.as_str(), &fmt_f64(*t), &fmt_f64(*y)])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(cov_path)?;
    let mut header = vec!["subject_id".to_string()];
    header.extend(dataset.covariate_names().iter().skip(1).cloned());
    header.push("delta".to_string());
    w.write_record(&header)?;
    for s in dataset.subjects() {
        let mut rec = vec![s.id.clone()];
        rec.extend(s.x.iter().skip(1).map(|v| fmt_f64(*v)));
        rec.push(fmt_f64(s.delta));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Hidden-truth sidecar for simulated datasets.
pub fn write_truth_csv(
    truth: &HiddenTruth,
    dataset: &LongitudinalDataset,
    path: &Path,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    let q = truth.alpha.first().map_or(0, Vec::len);
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..q).map(|j| format!("alpha{j}")));
    header.push("b".to_string());
    w.write_record(&header)?;
    for (s, (a, b)) in dataset.subjects().iter().zip(truth.alpha.iter().zip(&truth.b)) {
        let mut rec = vec![s.id.clone()];
        rec.extend(a.iter().map(|v| fmt_f64(*v)));
        rec.push(fmt_f64(*b));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the fit table; the serialization order of the fields is the
/// documented column order.
#[derive(Debug, Serialize, Deserialize)]
pub struct BetaRow {
    pub tau: String,
    pub coef_name: String,
    pub estimate: String,
    pub naive_estimate: String,
    pub se: String,
    pub ci_lo: String,
    pub ci_hi: String,
    pub converged: bool,
}

pub fn write_beta_table(
    result: &QuantileFitResult,
    draws: &ResampleDraws,
    path: &Path,
    format: OutputFormat,
) -> Result<(), IoError> {
    let mut rows = Vec::new();
    for (ti, tau) in result.tau_grid.iter().enumerate() {
        for (c, name) in result.coef_names.iter().enumerate() {
            rows.push(BetaRow {
                tau: fmt_f64(*tau),
                coef_name: name.clone(),
                estimate: fmt_f64(result.beta_hat[ti][c]),
                naive_estimate: fmt_f64(result.beta_naive[ti][c]),
                se: fmt_f64(draws.se[ti][c]),
                ci_lo: fmt_f64(draws.ci_lower[ti][c]),
                ci_hi: fmt_f64(draws.ci_upper[ti][c]),
                converged: result.converged[ti],
            });
        }
    }
    write_rows(&rows, path, format)
}

/// Benchmark aggregate table: fixed columns
/// tau, coef, bias_naive, bias_proposed, sd, ese, coverage (proposed
/// dispersion/coverage; empty when resampling was disabled).
#[derive(Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub tau: String,
    pub coef: String,
    pub bias_naive: String,
    pub bias_proposed: String,
    pub sd: String,
    pub ese: String,
    pub coverage: String,
}

pub fn write_bench_table(
    report: &ReplicationReport,
    path: &Path,
    format: OutputFormat,
) -> Result<(), IoError> {
    let rows: Vec<BenchRow> = report
        .cells
        .iter()
        .map(|c| BenchRow {
            tau: fmt_f64(c.tau),
            coef: c.coef.clone(),
            bias_naive: fmt_f64(c.bias_naive),
            bias_proposed: fmt_f64(c.bias_proposed),
            sd: fmt_f64(c.sd_proposed),
            ese: c.ese_proposed.map(fmt_f64).unwrap_or_default(),
            coverage: c.coverage_proposed.map(fmt_f64).unwrap_or_default(),
        })
        .collect();
    write_rows(&rows, path, format)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConstancyRow {
    pub covariate: String,
    pub statistic: String,
    pub lower: String,
    pub upper: String,
    pub reject: bool,
    pub tau_l: String,
    pub tau_u: String,
    pub alpha: String,
}

pub fn write_constancy_table(
    results: &[(String, ConstancyTestResult)],
    path: &Path,
    format: OutputFormat,
) -> Result<(), IoError> {
    let rows: Vec<ConstancyRow> = results
        .iter()
        .map(|(name, r)| ConstancyRow {
            covariate: name.clone(),
            statistic: fmt_f64(r.statistic),
            lower: fmt_f64(r.lower),
            upper: fmt_f64(r.upper),
            reject: r.reject,
            tau_l: fmt_f64(r.tau_window.0),
            tau_u: fmt_f64(r.tau_window.1),
            alpha: fmt_f64(r.alpha),
        })
        .collect();
    write_rows(&rows, path, format)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BandwidthRow {
    pub h: String,
    pub m1: String,
    pub m2: String,
    pub disqualified: bool,
}

pub fn write_bandwidth_table(
    search: &BandwidthSearch,
    path: &Path,
    format: OutputFormat,
) -> Result<(), IoError> {
    let rows: Vec<BandwidthRow> = search
        .h_grid
        .iter()
        .enumerate()
        .map(|(i, h)| BandwidthRow {
            h: fmt_f64(*h),
            m1: search.m1_curve[i].map(fmt_f64).unwrap_or_default(),
            m2: search.m2_curve[i].map(fmt_f64).unwrap_or_default(),
            disqualified: search.disqualified.contains(h),
        })
        .collect();
    write_rows(&rows, path, format)
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path, format: OutputFormat) -> Result<(), IoError> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            let mut f = fs::File::create(path)?;
            serde_json::to_writer_pretty(&mut f, rows)?;
            f.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Everything needed to reproduce a run: the validated configuration, the
/// seed, run-level summaries, the exclusion report, and content hashes of
/// the inputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub config: ModelConfig,
    pub n_subjects: usize,
    pub n_used: usize,
    pub sigma2_hat: f64,
    pub sigma2_used: f64,
    pub h_used: f64,
    pub exclusions: Vec<(String, String)>,
    pub input_sha256: BTreeMap<String, String>,
    pub n_b: usize,
    pub alpha: f64,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config: &ModelConfig,
        dataset: &LongitudinalDataset,
        stage1: &StageOne,
        result: &QuantileFitResult,
        n_b: usize,
        alpha: f64,
    ) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            config: config.clone(),
            n_subjects: dataset.n(),
            n_used: stage1.n_used,
            sigma2_hat: stage1.sigma2_hat,
            sigma2_used: result.sigma2_used,
            h_used: result.h_used,
            exclusions: stage1
                .excluded
                .iter()
                .map(|(id, r)| (id.clone(), r.to_string()))
                .collect(),
            input_sha256: BTreeMap::new(),
            n_b,
            alpha,
        }
    }

    pub fn add_input_hash(&mut self, path: &Path) -> Result<(), IoError> {
        self.input_sha256.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let mut hasher = Sha256::new();
    let mut f = fs::File::open(path)?;
    let mut buf = [0u8; 65_536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Resampling draws plus the context needed to run post-hoc tests.
#[derive(Debug, Clone)]
pub struct PersistedDraws {
    pub draws: ResampleDraws,
    pub beta_hat: Vec<Vec<f64>>,
    pub coef_names: Vec<String>,
    pub seed: u64,
}

const DRAWS_MAGIC: &[u8; 8] = b"TQDRAWS1";
const DRAWS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DrawsHeader {
    version: u32,
    seed: u64,
    alpha: f64,
    tau_grid: Vec<f64>,
    coef_names: Vec<String>,
    n_b_requested: usize,
    n_b_used: usize,
    n_b_dropped: usize,
    flagged: bool,
    has_naive: bool,
    beta_hat: Vec<Vec<f64>>,
    se: Vec<Vec<f64>>,
    ci_lower: Vec<Vec<f64>>,
    ci_upper: Vec<Vec<f64>>,
    pct_lower: Vec<Vec<f64>>,
    pct_upper: Vec<Vec<f64>>,
    se_naive: Option<Vec<Vec<f64>>>,
    ci_lower_naive: Option<Vec<Vec<f64>>>,
    ci_upper_naive: Option<Vec<Vec<f64>>>,
}

/// Binary sidecar layout: magic, little-endian u32 JSON-header length, the
/// JSON header, then `n_b_used * n_tau * p` doubles of corrected draws,
/// `n_b_used` doubles of sigma2 draws, and the same-shaped naive draws when
/// present. Everything little-endian f64.
pub fn write_draws(persisted: &PersistedDraws, path: &Path) -> Result<(), IoError> {
    let d = &persisted.draws;
    let header = DrawsHeader {
        version: DRAWS_VERSION,
        seed: persisted.seed,
        alpha: d.alpha,
        tau_grid: d.tau_grid.clone(),
        coef_names: persisted.coef_names.clone(),
        n_b_requested: d.n_b_requested,
        n_b_used: d.n_b_used,
        n_b_dropped: d.n_b_dropped,
        flagged: d.flagged,
        has_naive: d.beta_star_naive.is_some(),
        beta_hat: persisted.beta_hat.clone(),
        se: d.se.clone(),
        ci_lower: d.ci_lower.clone(),
        ci_upper: d.ci_upper.clone(),
        pct_lower: d.pct_lower.clone(),
        pct_upper: d.pct_upper.clone(),
        se_naive: d.se_naive.clone(),
        ci_lower_naive: d.ci_lower_naive.clone(),
        ci_upper_naive: d.ci_upper_naive.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(DRAWS_MAGIC)?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    let mut write_f64 = |v: f64| f.write_all(&v.to_le_bytes());
    for rep in &d.beta_star {
        for tau_row in rep {
            for &v in tau_row {
                write_f64(v)?;
            }
        }
    }
    for &v in &d.sigma2_star {
        write_f64(v)?;
    }
    if let Some(naive) = &d.beta_star_naive {
        for rep in naive {
            for tau_row in rep {
                for &v in tau_row {
                    write_f64(v)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_draws(path: &Path) -> Result<PersistedDraws, IoError> {
    let bytes = fs::read(path)?;
    let err = |reason: &str| IoError::Sidecar {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != DRAWS_MAGIC {
        return Err(err("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(err("truncated header"));
    }
    let header: DrawsHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    if header.version != DRAWS_VERSION {
        return Err(err(&format!("unsupported version {}", header.version)));
    }
    let n_tau = header.tau_grid.len();
    let p = header.coef_names.len();
    let m = header.n_b_used;
    let per_rep = n_tau * p;
    let naive_count = if header.has_naive { m * per_rep } else { 0 };
    let expected = 12 + hlen + 8 * (m * per_rep + m + naive_count);
    if bytes.len() != expected {
        return Err(err(&format!("payload length {} != expected {}", bytes.len(), expected)));
    }
    let mut off = 12 + hlen;
    let mut next_f64 = || {
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    let mut beta_star = Vec::with_capacity(m);
    for _ in 0..m {
        let mut rep = Vec::with_capacity(n_tau);
        for _ in 0..n_tau {
            rep.push((0..p).map(|_| next_f64()).collect::<Vec<f64>>());
        }
        beta_star.push(rep);
    }
    let sigma2_star: Vec<f64> = (0..m).map(|_| next_f64()).collect();
    let beta_star_naive = if header.has_naive {
        let mut all = Vec::with_capacity(m);
        for _ in 0..m {
            let mut rep = Vec::with_capacity(n_tau);
            for _ in 0..n_tau {
                rep.push((0..p).map(|_| next_f64()).collect::<Vec<f64>>());
            }
            all.push(rep);
        }
        Some(all)
    } else {
        None
    };

    Ok(PersistedDraws {
        draws: ResampleDraws {
            tau_grid: header.tau_grid,
            alpha: header.alpha,
            n_b_requested: header.n_b_requested,
            n_b_used: header.n_b_used,
            n_b_dropped: header.n_b_dropped,
            flagged: header.flagged,
            beta_star,
            sigma2_star,
            se: header.se,
            ci_lower: header.ci_lower,
            ci_upper: header.ci_upper,
            pct_lower: header.pct_lower,
            pct_upper: header.pct_upper,
            beta_star_naive,
            se_naive: header.se_naive,
            ci_lower_naive: header.ci_lower_naive,
            ci_upper_naive: header.ci_upper_naive,
        },
        beta_hat: header.beta_hat,
        coef_names: header.coef_names,
        seed: header.seed,
    })
}

/// Flat key-value configuration file: `key = value` lines, `#` comments.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(IoError::ConfigFile {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("expected `key = value`, got `{raw}`"),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    #[test]
    fn grid_spec_parses_paper_grid_to_eight_candidates() {
        let g = parse_grid_spec("0.8:1.5:0.1").unwrap();
        assert_eq!(g.len(), 8);
        assert!((g[0] - 0.8).abs() < 1e-12);
        assert!((g[7] - 1.5).abs() < 1e-12);
        let g = parse_grid_spec("0.1,0.5,0.9").unwrap();
        assert_eq!(g, vec![0.1, 0.5, 0.9]);
        assert!(parse_grid_spec("1.0:0.5:0.1").is_err());
        assert!(parse_grid_spec("a,b").is_err());
    }

    #[test]
    fn ingest_joins_and_round_trips() {
        let dir = TempDir::new().unwrap();
        let long = dir.path().join("long.csv");
        let cov = dir.path().join("cov.csv");
        write(
            &long,
            "subject_id,time,y\nb,0.5,1.25\nb,1.5,2.5\na,0.0,0.125\na,1.0,1.0\na,2.0,2.0\n",
        );
        write(&cov, "subject_id,age,dose\na,0.25,1\nb,0.5,0\n");
        let ds = ingest_csv(&long, &cov).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.p(), 3);
        assert_eq!(ds.covariate_names(), &["intercept", "age", "dose"]);
        assert_eq!(ds.subjects()[0].id, "a");
        assert_eq!(ds.subjects()[0].x, vec![1.0, 0.25, 1.0]);
        assert_eq!(ds.subjects()[0].delta, 1.0);

        // serialize -> ingest -> serialize is a fixpoint
        let long2 = dir.path().join("long2.csv");
        let cov2 = dir.path().join("cov2.csv");
        write_dataset_csv(&ds, &long2, &cov2).unwrap();
        let ds2 = ingest_csv(&long2, &cov2).unwrap();
        let long3 = dir.path().join("long3.csv");
        let cov3 = dir.path().join("cov3.csv");
        write_dataset_csv(&ds2, &long3, &cov3).unwrap();
        assert_eq!(fs::read(&long2).unwrap(), fs::read(&long3).unwrap());
        assert_eq!(fs::read(&cov2).unwrap(), fs::read(&cov3).unwrap());
    }

    #[test]
    fn ingest_rejects_join_failures_with_ids() {
        let dir = TempDir::new().unwrap();
        let long = dir.path().join("long.csv");
        let cov = dir.path().join("cov.csv");
        write(&long, "subject_id,time,y\na,0,1\nb,0,1\n");
        write(&cov, "subject_id,age\na,0.25\n");
        match ingest_csv(&long, &cov) {
            Err(IoError::UnmatchedSubjects { ids, .. }) => assert_eq!(ids, vec!["b"]),
            other => panic!("expected join failure, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_nonpositive_delta_with_row() {
        let dir = TempDir::new().unwrap();
        let long = dir.path().join("long.csv");
        let cov = dir.path().join("cov.csv");
        write(&long, "subject_id,time,y\na,0,1\n");
        write(&cov, "subject_id,age,delta\na,0.25,0\n");
        match ingest_csv(&long, &cov) {
            Err(IoError::BadDeltaRow { row, value, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(value, 0.0);
            }
            other => panic!("expected delta error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_sorts_unordered_times_but_rejects_duplicates() {
        let dir = TempDir::new().unwrap();
        let long = dir.path().join("long.csv");
        let cov = dir.path().join("cov.csv");
        write(&long, "subject_id,time,y\na,2.0,2\na,1.0,1\na,3.0,3\n");
        write(&cov, "subject_id,age\na,0.25\n");
        let ds = ingest_csv(&long, &cov).unwrap();
        assert_eq!(ds.subjects()[0].times, vec![1.0, 2.0, 3.0]);
        assert_eq!(ds.subjects()[0].y, vec![1.0, 2.0, 3.0]);

        write(&long, "subject_id,time,y\na,2.0,2\na,2.0,1\n");
        assert!(matches!(ingest_csv(&long, &cov), Err(IoError::DuplicateTime { .. })));
    }

    #[test]
    fn ingest_rejects_bad_headers_and_values() {
        let dir = TempDir::new().unwrap();
        let long = dir.path().join("long.csv");
        let cov = dir.path().join("cov.csv");
        write(&long, "id,time,y\na,0,1\n");
        write(&cov, "subject_id,age\na,0.25\n");
        assert!(matches!(ingest_csv(&long, &cov), Err(IoError::MalformedHeader { .. })));

        write(&long, "subject_id,time,y\na,zero,1\n");
        match ingest_csv(&long, &cov) {
            Err(IoError::BadNumber { row, column, value, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "time");
                assert_eq!(value, "zero");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        write(&long, "subject_id,time,y\na,0,NaN\n");
        assert!(matches!(ingest_csv(&long, &cov), Err(IoError::NonFinite { .. })));
    }

    #[test]
    fn fmt_round_trips_doubles() {
        for &v in &[0.1, -1.0 / 3.0, 1e-300, 123456.789, 2.0] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn config_file_parses_and_reports_bad_lines() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("run.conf");
        write(&p, "# comment\nk = 2\ntau-grid = 0.1:0.9:0.1 # inline\n");
        let map = parse_config_file(&p).unwrap();
        assert_eq!(map.get("k").map(String::as_str), Some("2"));
        assert_eq!(map.get("tau-grid").map(String::as_str), Some("0.1:0.9:0.1"));

        write(&p, "k: 2\n");
        match parse_config_file(&p) {
            Err(IoError::ConfigFile { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
