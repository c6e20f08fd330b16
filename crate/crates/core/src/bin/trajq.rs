//! Command-line front end: fit, simulate, bench, test-constancy, select-h.
//!
//! Every subcommand is deterministic given --seed. Failures exit nonzero
//! with a machine-readable JSON error object on stderr. A flat key-value
//! config file (--config) can supply any long flag; explicit flags win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trajq::data::{BandwidthSpec, ErrorFamily, ModelConfig};
use trajq::estimator::fit_all;
use trajq::inference::{constancy_test, resample_fit, ResampleOptions, WeightScheme};
use trajq::io::{
    ingest_csv, parse_config_file, parse_grid_spec, read_draws, write_bandwidth_table,
    write_bench_table, write_beta_table, write_constancy_table, write_dataset_csv, write_draws,
    write_truth_csv, OutputFormat, PersistedDraws, RunManifest,
};
use trajq::simgen::{
    base_config, generate, run_replication, ReplicationOptions, ScenarioCase, SimScenario,
};
use trajq::stage1::run_stage_one;

#[derive(Parser)]
#[command(
    name = "trajq",
    version,
    about = "Quantile regression of latent longitudinal trajectory features"
)]
struct Cli {
    /// Worker threads for parallel stages (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DatasetArgs {
    /// Long-format repeated measures CSV (subject_id,time,y).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Subject-level covariate CSV (subject_id,<x...>[,delta]).
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Polynomial order of the trajectory model.
    #[arg(long)]
    k: Option<usize>,
    /// Evaluation time of the trajectory changing rate.
    #[arg(long = "t-star")]
    t_star: Option<f64>,
    /// Trajectory error family: normal|laplace.
    #[arg(long = "error-family")]
    error_family: Option<String>,
    /// Treat the error variance as known instead of estimating it.
    #[arg(long = "known-sigma2")]
    known_sigma2: Option<f64>,
    /// Optimizer restarts per quantile level.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the corrected quantile regression; writes the beta table, run
    /// manifest, and resampling-draws sidecar.
    Fit {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Quantile grid: comma list or start:end:step.
        #[arg(long = "tau-grid")]
        tau_grid: Option<String>,
        /// Fixed smoothing bandwidth.
        #[arg(long)]
        h: Option<f64>,
        /// Candidate bandwidth grid for automatic selection.
        #[arg(long = "h-grid", conflicts_with = "h")]
        h_grid: Option<String>,
        /// Simulation replicates per bandwidth candidate.
        #[arg(long = "n-c")]
        n_c: Option<usize>,
        /// Resampling replicates for standard errors.
        #[arg(long = "n-b")]
        n_b: Option<usize>,
        /// CI level is 1 - alpha.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Output table format: csv|json.
        #[arg(long)]
        format: Option<String>,
        /// Flat key-value config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a scenario dataset with a hidden-truth sidecar.
    Simulate {
        /// Scenario: case1|case2|case3|case4|quadratic-laplace|quadratic-normal|robust-uniform.
        #[arg(long)]
        case: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Monte-Carlo replication study; writes the aggregate
    /// bias/SD/ESE/coverage table.
    Bench {
        #[arg(long)]
        case: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        reps: usize,
        #[arg(long = "n-b", default_value_t = 200)]
        n_b: usize,
        #[arg(long = "tau-grid", default_value = "0.1:0.9:0.1")]
        tau_grid: String,
        /// Restrict resampling to these taus (cost control); default all.
        #[arg(long = "resample-taus")]
        resample_taus: Option<String>,
        #[arg(long, default_value_t = 0.8)]
        h: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Constancy test of fitted coefficients over a quantile window, from a
    /// persisted draws sidecar.
    TestConstancy {
        /// Draws sidecar written by `fit`.
        #[arg(long)]
        draws: PathBuf,
        /// Covariate name to test; repeatable. Default: all non-intercept.
        #[arg(long)]
        covariate: Vec<String>,
        /// Window as tau_L:tau_U.
        #[arg(long = "tau-window")]
        tau_window: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Run bandwidth selection and report the criterion curves and h0.
    SelectH {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Quantile level at which to select.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long = "h-grid")]
        h_grid: Option<String>,
        #[arg(long = "n-c")]
        n_c: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Flag resolution: explicit flag, then config file, then default.
struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    fn new(config: Option<&PathBuf>) -> Result<Self> {
        let file = match config {
            Some(p) => parse_config_file(p)?,
            None => BTreeMap::new(),
        };
        Ok(Resolver { file })
    }

    fn get<T: FromStr + Clone>(&self, flag: &Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(Some(v.clone()));
        }
        match self.file.get(key) {
            Some(raw) => {
                raw.parse::<T>().map(Some).map_err(|e| anyhow!("config key `{key}`: {e}"))
            }
            None => Ok(None),
        }
    }

    fn require<T: FromStr + Clone>(&self, flag: &Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(flag, key)?
            .ok_or_else(|| anyhow!("missing required option `--{key}` (flag or config file)"))
    }
}

fn parse_window(spec: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 2 {
        bail!("--tau-window must be tau_L:tau_U, got `{spec}`");
    }
    let lo: f64 = parts[0].trim().parse().context("--tau-window lower bound")?;
    let hi: f64 = parts[1].trim().parse().context("--tau-window upper bound")?;
    Ok((lo, hi))
}

fn ensure_output_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create --output directory {}", dir.display()))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .context("--workers: thread pool already initialized")?;
    }

    match cli.command {
        Command::Fit {
            dataset,
            tau_grid,
            h,
            h_grid,
            n_c,
            n_b,
            alpha,
            seed,
            output,
            format,
            config,
        } => {
            let r = Resolver::new(config.as_ref())?;
            let input = r.require(&dataset.input, "input")?;
            let covs = r.require(&dataset.covariates, "covariates")?;
            let output = r.require(&output, "output")?;
            let k = r.require(&dataset.k, "k")?;
            let t_star = r.get(&dataset.t_star, "t-star")?.unwrap_or(0.0);
            let family: ErrorFamily = r
                .require(&dataset.error_family, "error-family")?
                .parse()
                .map_err(|e: String| anyhow!("--error-family: {e}"))?;
            let tau_grid_spec =
                r.get(&tau_grid, "tau-grid")?.unwrap_or_else(|| "0.1:0.9:0.1".into());
            let taus = parse_grid_spec(&tau_grid_spec).map_err(|e| anyhow!("--tau-grid: {e}"))?;
            let seed = r.get(&seed, "seed")?.unwrap_or(1);
            let n_b = r.get(&n_b, "n-b")?.unwrap_or(200);
            let alpha = r.get(&alpha, "alpha")?.unwrap_or(0.05);
            let format: OutputFormat = r
                .get(&format, "format")?
                .unwrap_or_else(|| "csv".into())
                .parse()
                .map_err(|e: String| anyhow!("--format: {e}"))?;

            let bandwidth = match (r.get(&h, "h")?, r.get(&h_grid, "h-grid")?) {
                (Some(h), None) => BandwidthSpec::Fixed(h),
                (None, Some(spec)) => BandwidthSpec::Auto {
                    grid: parse_grid_spec(&spec).map_err(|e| anyhow!("--h-grid: {e}"))?,
                    n_c: r.get(&n_c, "n-c")?.unwrap_or(20),
                },
                (Some(_), Some(_)) => bail!("--h and --h-grid are mutually exclusive"),
                (None, None) => BandwidthSpec::Fixed(0.8),
            };

            let mut cfg = ModelConfig::new(k, t_star, family, taus, bandwidth, seed)?;
            if let Some(s2) = r.get(&dataset.known_sigma2, "known-sigma2")? {
                cfg = cfg.with_known_sigma2(s2)?;
            }
            if let Some(n) = r.get(&dataset.restarts, "restarts")? {
                cfg = cfg.with_restarts(n);
            }

            ensure_output_dir(&output)?;
            let ds = ingest_csv(&input, &covs)?;
            let out = fit_all(&ds, &cfg)?;
            let draws = resample_fit(
                &out.data,
                &out.stage1,
                cfg.known_sigma2,
                &out.result.beta_hat,
                None,
                &cfg.tau_grid,
                out.result.h_used,
                &ResampleOptions { n_b, alpha, weights: WeightScheme::Exponential },
                &trajq::rng::Stream::new(seed),
            )?;

            let beta_path = output.join(format!("beta.{}", format.extension()));
            write_beta_table(&out.result, &draws, &beta_path, format)?;
            let persisted = PersistedDraws {
                draws,
                beta_hat: out.result.beta_hat.clone(),
                coef_names: out.result.coef_names.clone(),
                seed,
            };
            write_draws(&persisted, &output.join("draws.bin"))?;
            let mut manifest =
                RunManifest::new("fit", &cfg, &ds, &out.stage1, &out.result, n_b, alpha);
            manifest.add_input_hash(&input)?;
            manifest.add_input_hash(&covs)?;
            manifest.write(&output.join("manifest.json"))?;
            println!(
                "fit: {} subjects ({} used), sigma2_hat = {:.6}, h = {:.3}, tables in {}",
                ds.n(),
                out.stage1.n_used,
                out.stage1.sigma2_hat,
                out.result.h_used,
                output.display()
            );
        }

        Command::Simulate { case, n, seed, output } => {
            let case = ScenarioCase::parse(&case)?;
            ensure_output_dir(&output)?;
            let generated = generate(&SimScenario { case, n, seed });
            write_dataset_csv(
                &generated.dataset,
                &output.join("longitudinal.csv"),
                &output.join("covariates.csv"),
            )?;
            write_truth_csv(&generated.truth, &generated.dataset, &output.join("truth.csv"))?;
            println!("simulate: {} `{}` subjects written to {}", n, case.name(), output.display());
        }

        Command::Bench {
            case,
            n,
            reps,
            n_b,
            tau_grid,
            resample_taus,
            h,
            alpha,
            seed,
            restarts,
            output,
            format,
        } => {
            let case = ScenarioCase::parse(&case)?;
            let taus = parse_grid_spec(&tau_grid).map_err(|e| anyhow!("--tau-grid: {e}"))?;
            let resample: Option<Vec<f64>> = match &resample_taus {
                Some(spec) => {
                    Some(parse_grid_spec(spec).map_err(|e| anyhow!("--resample-taus: {e}"))?)
                }
                None => None,
            };
            let format: OutputFormat =
                format.parse().map_err(|e: String| anyhow!("--format: {e}"))?;
            ensure_output_dir(&output)?;

            let mut cfg = base_config(case, taus, seed).with_restarts(restarts);
            cfg.bandwidth = BandwidthSpec::Fixed(h);
            cfg.validate()?;
            let scenario = SimScenario { case, n, seed };
            let opts = ReplicationOptions { n_reps: reps, n_b, alpha };
            let report = run_replication(&scenario, &cfg, &opts, resample.as_deref())?;
            write_bench_table(
                &report,
                &output.join(format!("bench.{}", format.extension())),
                format,
            )?;
            let f = std::fs::File::create(output.join("bench_report.json"))?;
            serde_json::to_writer_pretty(f, &report)?;
            println!(
                "bench: {} of {} replicates aggregated into {}",
                report.n_reps_used,
                reps,
                output.display()
            );
        }

        Command::TestConstancy { draws, covariate, tau_window, alpha, output, format } => {
            let format: OutputFormat =
                format.parse().map_err(|e: String| anyhow!("--format: {e}"))?;
            let window = parse_window(&tau_window)?;
            ensure_output_dir(&output)?;
            let persisted = read_draws(&draws)?;
            let names = &persisted.coef_names;
            let targets: Vec<usize> = if covariate.is_empty() {
                (1..names.len()).collect()
            } else {
                covariate
                    .iter()
                    .map(|c| {
                        names.iter().position(|n| n == c).ok_or_else(|| {
                            anyhow!("--covariate `{c}` not found; available: {names:?}")
                        })
                    })
                    .collect::<Result<_>>()?
            };
            let mut results = Vec::new();
            for j in targets {
                let r = constancy_test(&persisted.draws, &persisted.beta_hat, j, window, alpha)?;
                println!(
                    "constancy {}: T = {:.4}, region (-inf, {:.4}) U ({:.4}, inf) => {}",
                    names[j],
                    r.statistic,
                    r.lower,
                    r.upper,
                    if r.reject { "reject" } else { "keep" }
                );
                results.push((names[j].clone(), r));
            }
            write_constancy_table(
                &results,
                &output.join(format!("constancy.{}", format.extension())),
                format,
            )?;
        }

        Command::SelectH { dataset, tau, h_grid, n_c, seed, output, format, config } => {
            let r = Resolver::new(config.as_ref())?;
            let input = r.require(&dataset.input, "input")?;
            let covs = r.require(&dataset.covariates, "covariates")?;
            let output = r.require(&output, "output")?;
            let k = r.require(&dataset.k, "k")?;
            let t_star = r.get(&dataset.t_star, "t-star")?.unwrap_or(0.0);
            let family: ErrorFamily = r
                .require(&dataset.error_family, "error-family")?
                .parse()
                .map_err(|e: String| anyhow!("--error-family: {e}"))?;
            let tau = r.get(&tau, "tau")?.unwrap_or(0.5);
            let grid_spec = r.get(&h_grid, "h-grid")?.unwrap_or_else(|| "0.4:1.6:0.1".into());
            let grid = parse_grid_spec(&grid_spec).map_err(|e| anyhow!("--h-grid: {e}"))?;
            let n_c = r.get(&n_c, "n-c")?.unwrap_or(20);
            let seed = r.get(&seed, "seed")?.unwrap_or(1);
            let restarts = r.get(&dataset.restarts, "restarts")?.unwrap_or(5);
            let format: OutputFormat = r
                .get(&format, "format")?
                .unwrap_or_else(|| "csv".into())
                .parse()
                .map_err(|e: String| anyhow!("--format: {e}"))?;

            let cfg = ModelConfig::new(
                k,
                t_star,
                family,
                vec![tau],
                BandwidthSpec::Auto { grid: grid.clone(), n_c },
                seed,
            )?;
            ensure_output_dir(&output)?;
            let ds = ingest_csv(&input, &covs)?;
            let stage1 = run_stage_one(&ds, &cfg)?;
            let sigma2 =
                r.get(&dataset.known_sigma2, "known-sigma2")?.unwrap_or(stage1.sigma2_hat);
            let data = trajq::loss::ObjectiveData::from_stage_one(&ds, &stage1);
            let search = trajq::bandwidth::select_bandwidth(
                &data,
                family,
                tau,
                &grid,
                n_c,
                sigma2,
                restarts,
                &trajq::rng::Stream::new(seed).derive(trajq::estimator::BANDWIDTH_DOMAIN),
            )?;
            write_bandwidth_table(
                &search,
                &output.join(format!("bandwidth_curves.{}", format.extension())),
                format,
            )?;
            let f = std::fs::File::create(output.join("bandwidth.json"))?;
            serde_json::to_writer_pretty(f, &search)?;
            println!(
                "select-h: h1 = {:.3}, h2 = {:.3}, h0 = {:.4} (tau = {tau}) written to {}",
                search.h1,
                search.h2,
                search.selected,
                output.display()
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        let obj = serde_json::json!({
            "error": e.to_string(),
            "chain": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        });
        eprintln!("{obj}");
        std::process::exit(1);
    }
}
