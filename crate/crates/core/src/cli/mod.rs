//! Command-line interface: `train`, `fit`, `simulate` and `evaluate`.
//!
//! Exit codes: 0 success (possibly with per-item errors), 1 usage error,
//! 2 I/O or input error, 3 numerical failure.

pub mod commands;
pub mod files;
pub mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::estimators::Method;
use crate::expfam::BandwidthChoice;
use crate::grid::DEFAULT_N_GRID;
use crate::simgen::{ScenarioKind, ScenarioSpec, SizeSpec};
use crate::tailscale::DEFAULT_DELTA;
use commands::{EvaluateOptions, Estimator, FitOptions, KChoice, TrainOptions};
use simulate::SimulateOptions;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment fallback for `--threads`.
pub const THREADS_ENV: &str = "REPDEN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "repden", version, about = "Repeated density estimation with FPCA exponential families")]
pub struct Cli {
    /// Worker threads (default: REPDEN_THREADS, else all logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a family from training subpopulations.
    Train(TrainArgs),
    /// Fit new subpopulations within a trained family.
    Fit(FitArgs),
    /// Run a Monte Carlo scenario and report mean KL divergences.
    Simulate(SimulateArgs),
    /// Leave-one-out cross-entropy and return levels for held-out samples.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sample CSV with header `subpop_id,value`.
    #[arg(long)]
    pub input: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Domain as `lo,hi`; required unless --log-scale.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_domain)]
    pub domain: Option<(f64, f64)>,
    #[arg(long, default_value_t = DEFAULT_N_GRID)]
    pub grid: usize,
    /// Maximum number of retained components.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// `median` or a positive number.
    #[arg(long, default_value = "median", value_parser = parse_bandwidth)]
    pub bandwidth: BandwidthChoice,
    /// Subpopulations with fewer observations are excluded.
    #[arg(long, default_value_t = 2)]
    pub min_train_size: usize,
    /// Model log-transformed positive data.
    #[arg(long)]
    pub log_scale: bool,
    /// Padding beyond the largest log observation.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    pub delta: f64,
    /// Recorded in the model provenance.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "map", value_parser = parse_method)]
    pub method: Method,
    /// Number of components, or `aic` (the default) for AIC selection.
    #[arg(long, value_parser = parse_k)]
    pub k: Option<KArg>,
    /// Cap for AIC selection.
    #[arg(long)]
    pub k_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    pub scenario: ScenarioKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub reps: usize,
    #[arg(long)]
    pub n_train: Option<usize>,
    /// `N` or `lo-hi` (inclusive).
    #[arg(long, value_parser = parse_size)]
    pub train_size: Option<SizeSpec>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long, value_parser = parse_size)]
    pub test_size: Option<SizeSpec>,
    #[arg(long, default_value_t = DEFAULT_N_GRID)]
    pub grid: usize,
    /// Maximum number of retained training components.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Number of components for the family fits, or `aic` (the default).
    #[arg(long, value_parser = parse_k)]
    pub k: Option<KArg>,
    /// Estimators to run, comma separated.
    #[arg(long, default_value = "mle,map,blup,kde", value_delimiter = ',', value_parser = parse_estimator)]
    pub methods: Vec<Estimator>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write generated samples and true densities.
    #[arg(long)]
    pub dump_data: bool,
    /// Also write one row per test fit.
    #[arg(long)]
    pub dump_fits: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "mle,map,blup,kde", value_delimiter = ',', value_parser = parse_estimator)]
    pub methods: Vec<Estimator>,
    /// Number of components, or `aic` (the default).
    #[arg(long, value_parser = parse_k)]
    pub k: Option<KArg>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Compute leave-one-out cross-entropy.
    #[arg(long)]
    pub loo: bool,
    /// Return periods in years, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub return_levels: Vec<f64>,
    /// Upper size boundaries of the strata, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10,35,75")]
    pub strata: Vec<usize>,
}

fn parse_domain(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad lower bound {a:?}"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad upper bound {b:?}"))?;
    if !(lo < hi) {
        return Err("need lo < hi".into());
    }
    Ok((lo, hi))
}

fn parse_bandwidth(s: &str) -> Result<BandwidthChoice, String> {
    if s.eq_ignore_ascii_case("median") {
        return Ok(BandwidthChoice::Median);
    }
    match s.parse::<f64>() {
        Ok(h) if h > 0.0 && h.is_finite() => Ok(BandwidthChoice::Fixed(h)),
        _ => Err(format!("bandwidth must be `median` or a positive number, got {s:?}")),
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_size(s: &str) -> Result<SizeSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_estimator(s: &str) -> Result<Estimator, String> {
    s.trim().parse().map_err(|e: Error| e.to_string())
}

/// Value of a `--k` flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KArg {
    Fixed(usize),
    Aic,
}

fn parse_k(s: &str) -> Result<KArg, String> {
    if s.eq_ignore_ascii_case("aic") {
        return Ok(KArg::Aic);
    }
    match s.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(KArg::Fixed(k)),
        _ => Err(format!("expected a positive integer or `aic`, got {s:?}")),
    }
}

fn k_choice(k: Option<KArg>, k_max: Option<usize>) -> KChoice {
    match k {
        Some(KArg::Fixed(k)) => KChoice::Fixed(k),
        Some(KArg::Aic) | None => KChoice::Aic(k_max),
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::InvalidDomain(_)
        | Error::InvalidBandwidth(_)
        | Error::ComponentOutOfRange { .. } => EXIT_USAGE,
        Error::Io(_)
        | Error::Parse(_)
        | Error::OutOfDomain { .. }
        | Error::EmptySample
        | Error::NonPositiveObservation(_)
        | Error::TooFewTrajectories { .. } => EXIT_IO,
        _ => EXIT_NUMERICAL,
    }
}

fn configure_threads(requested: Option<usize>) -> Result<(), String> {
    let n = match requested {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| format!("{THREADS_ENV}={v:?} is not a count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n.filter(|&n| n > 0) {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => log::error!("could not serialize summary: {e}"),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Err(msg) = configure_threads(cli.threads) {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let outcome = match cli.command {
        Command::Train(a) => {
            let opts = TrainOptions {
                input: a.input,
                output: a.output,
                domain: a.domain,
                n_grid: a.grid,
                k_max: a.k_max,
                bandwidth: a.bandwidth,
                min_train_size: a.min_train_size,
                log_scale: a.log_scale,
                delta: a.delta,
                seed: a.seed,
            };
            commands::cmd_train(&opts).map(|s| print_json(&s))
        }
        Command::Fit(a) => {
            let opts = FitOptions {
                model: a.model,
                input: a.input,
                out_dir: a.out_dir,
                method: a.method,
                k: k_choice(a.k, a.k_max),
            };
            commands::cmd_fit(&opts).map(|records| {
                let ok = records.iter().filter(|r| r.fit.is_some()).count();
                print_json(&serde_json::json!({ "n_fitted": ok, "n_failed": records.len() - ok }));
            })
        }
        Command::Simulate(a) => {
            let mut spec = ScenarioSpec::standard(a.scenario, a.seed);
            spec.n_grid = a.grid;
            if let Some(n) = a.n_train {
                spec.n_train = n;
            }
            if let Some(s) = a.train_size {
                spec.train_size = s;
            }
            if let Some(n) = a.n_test {
                spec.n_test = n;
            }
            if let Some(s) = a.test_size {
                spec.test_size = s;
            }
            let opts = SimulateOptions {
                spec,
                reps: a.reps,
                k_max: a.k_max,
                k: k_choice(a.k, None),
                estimators: a.methods,
            };
            simulate::cmd_simulate(&opts, &a.out_dir, a.dump_data, a.dump_fits).map(|r| print_json(&r.aggregate))
        }
        Command::Evaluate(a) => {
            let opts = EvaluateOptions {
                model: a.model,
                input: a.input,
                out_dir: a.out_dir,
                estimators: a.methods,
                k: k_choice(a.k, a.k_max),
                loo: a.loo,
                return_periods: a.return_levels,
                strata: a.strata,
            };
            commands::cmd_evaluate(&opts).map(|s| print_json(&s))
        }
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
