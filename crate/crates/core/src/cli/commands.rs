//! The `train`, `fit` and `evaluate` commands as library functions.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::files::{file_stem, read_samples, write_csv, write_density, write_json, Model, ModelFile, RawSubpop};
use crate::error::{Error, Result};
use crate::estimators::{fit_with, select_k_aic, FitResult, Method};
use crate::expfam::{density, BandwidthChoice, FamilyModel, TrainConfig};
use crate::grid::{Domain, GridFn};
use crate::metrics::{loo_cross_entropy, return_level, summarize, EvalReport};
use crate::presmooth::{silverman_bandwidth, weighted_kde, KdeConfig, SubpopSample};
use crate::tailscale::{fit_scaled, log_observations, ScaledDensity, ScaledTrainConfig};

/// A density estimator usable for a new subpopulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "MAP")]
    Map,
    #[serde(rename = "BLUP")]
    Blup,
    /// Boundary-weighted KDE with the sample's own rule-of-thumb bandwidth.
    #[serde(rename = "KDE")]
    Kde,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Mle, Estimator::Map, Estimator::Blup, Estimator::Kde];

    pub fn method(self) -> Option<Method> {
        match self {
            Estimator::Mle => Some(Method::Mle),
            Estimator::Map => Some(Method::Map),
            Estimator::Blup => Some(Method::Blup),
            Estimator::Kde => None,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method() {
            Some(m) => m.fmt(f),
            None => f.write_str("KDE"),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("kde") {
            return Ok(Estimator::Kde);
        }
        Ok(match s.parse::<Method>()? {
            Method::Mle => Estimator::Mle,
            Method::Map => Estimator::Map,
            Method::Blup => Estimator::Blup,
        })
    }
}

/// Number of components used for a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KChoice {
    Fixed(usize),
    /// AIC over `1..=min(cap, K)`.
    Aic(Option<usize>),
}

/// A fitted density on the family grid (log scale for log-scale models).
pub struct FittedDensity {
    pub density: GridFn,
    pub fit: Option<FitResult>,
}

/// Fits `x` (already on the model's working scale) with one estimator.
pub fn fit_density(fam: &FamilyModel, x: &[f64], est: Estimator, k: KChoice) -> Result<FittedDensity> {
    match est.method() {
        Some(method) => {
            let fit = match k {
                KChoice::Fixed(k) => fit_with(fam, x, method, k)?,
                KChoice::Aic(cap) => {
                    let kmax = cap.unwrap_or(usize::MAX).min(fam.n_components());
                    select_k_aic(fam, x, method, kmax)?
                }
            };
            Ok(FittedDensity { density: density(fam, &fit.theta)?, fit: Some(fit) })
        }
        None => Ok(FittedDensity { density: kde_baseline(fam.domain(), x, fam.meta().bandwidth)?, fit: None }),
    }
}

/// Weighted KDE with the sample's own rule-of-thumb bandwidth, or
/// `fallback` when that is undefined.
pub fn kde_baseline(domain: &Domain, x: &[f64], fallback: f64) -> Result<GridFn> {
    let s = SubpopSample::new("kde", x.to_vec())?;
    let h = silverman_bandwidth(&s).unwrap_or(fallback);
    weighted_kde(&s, &KdeConfig::gaussian(h)?, domain)
}

/// Observations mapped to the model's working scale.
pub fn working_obs(model: &Model, obs: &[f64]) -> Result<Vec<f64>> {
    match model {
        Model::Plain(m) => {
            for &x in obs {
                m.domain().check_inside(x)?;
            }
            Ok(obs.to_vec())
        }
        Model::LogScale(s) => log_observations(s, obs),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Required unless `log_scale`.
    pub domain: Option<(f64, f64)>,
    pub n_grid: usize,
    pub k_max: Option<usize>,
    pub bandwidth: BandwidthChoice,
    pub min_train_size: usize,
    pub log_scale: bool,
    pub delta: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_used: usize,
    pub n_excluded: usize,
    pub excluded: Vec<String>,
    pub bandwidth: f64,
    pub domain: Domain,
    pub log_scale: bool,
    pub eigenvalues: Vec<f64>,
}

/// Trains a family on `raw` and returns it with the ids left out.
pub fn train_model(raw: &[RawSubpop], opts: &TrainOptions) -> Result<(Model, Vec<String>)> {
    let min_size = opts.min_train_size.max(2);
    let (keep, drop): (Vec<&RawSubpop>, Vec<&RawSubpop>) = raw.iter().partition(|s| s.obs.len() >= min_size);
    let samples = keep.iter().map(|s| s.to_sample()).collect::<Result<Vec<_>>>()?;
    let excluded: Vec<String> = drop.iter().map(|s| s.id.clone()).collect();
    if samples.len() < 2 {
        return Err(Error::TooFewTrajectories { needed: 2, got: samples.len() });
    }
    let model = if opts.log_scale {
        let cfg =
            ScaledTrainConfig { n_grid: opts.n_grid, k_max: opts.k_max, bandwidth: opts.bandwidth, delta: opts.delta };
        Model::LogScale(fit_scaled(&samples, &cfg)?)
    } else {
        let (lo, hi) = opts
            .domain
            .ok_or_else(|| Error::InvalidArgument("--domain lo,hi is required without --log-scale".into()))?;
        let cfg = TrainConfig { domain: Domain::new(lo, hi, opts.n_grid)?, k_max: opts.k_max, bandwidth: opts.bandwidth };
        Model::Plain(FamilyModel::train(&samples, &cfg)?)
    };
    Ok((model, excluded))
}

pub fn cmd_train(opts: &TrainOptions) -> Result<TrainSummary> {
    let raw = read_samples(&opts.input)?;
    let (model, excluded) = train_model(&raw, opts)?;
    ModelFile::from_model(&model, excluded.len(), opts.seed).write(&opts.output)?;
    let fam = model.family();
    log::info!("trained on {} subpopulations, {} excluded", fam.n_train(), excluded.len());
    Ok(TrainSummary {
        n_used: fam.n_train(),
        n_excluded: excluded.len(),
        excluded,
        bandwidth: fam.meta().bandwidth,
        domain: *fam.domain(),
        log_scale: model.is_log_scale(),
        eigenvalues: fam.sys().eigvals().to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub model: PathBuf,
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub method: Method,
    pub k: KChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub id: String,
    pub n_obs: usize,
    pub status: String,
    pub error: Option<String>,
    pub fit: Option<FitResult>,
}

struct FitItem {
    record: FitRecord,
    density: Option<(Vec<f64>, Vec<f64>)>,
}

fn fit_one(model: &Model, raw: &RawSubpop, method: Method, k: KChoice) -> FitItem {
    let attempt = || -> Result<(FitResult, Vec<f64>, Vec<f64>)> {
        if raw.obs.is_empty() {
            return Err(Error::EmptySample);
        }
        let x = working_obs(model, &raw.obs)?;
        let fd = fit_density(model.family(), &x, Estimator::from_method(method), k)?;
        let (xs, vals) = match model {
            Model::Plain(_) => (fd.density.domain().points(), fd.density.values().to_vec()),
            Model::LogScale(_) => {
                let py = ScaledDensity::from_log_density(&fd.density)?;
                (py.ys().to_vec(), py.values().to_vec())
            }
        };
        Ok((fd.fit.expect("family estimator"), xs, vals))
    };
    match attempt() {
        Ok((fit, xs, vals)) => FitItem {
            record: FitRecord { id: raw.id.clone(), n_obs: raw.obs.len(), status: "ok".into(), error: None, fit: Some(fit) },
            density: Some((xs, vals)),
        },
        Err(e) => FitItem {
            record: FitRecord {
                id: raw.id.clone(),
                n_obs: raw.obs.len(),
                status: "error".into(),
                error: Some(e.to_string()),
                fit: None,
            },
            density: None,
        },
    }
}

impl Estimator {
    pub fn from_method(m: Method) -> Self {
        match m {
            Method::Mle => Estimator::Mle,
            Method::Map => Estimator::Map,
            Method::Blup => Estimator::Blup,
        }
    }
}

/// Fits every subpopulation independently; failures are recorded per item.
pub fn cmd_fit(opts: &FitOptions) -> Result<Vec<FitRecord>> {
    let model = ModelFile::read(&opts.model)?.to_model()?;
    let raw = read_samples(&opts.input)?;
    let items: Vec<FitItem> = raw.par_iter().map(|r| fit_one(&model, r, opts.method, opts.k)).collect();
    let x_name = if model.is_log_scale() { "y" } else { "x" };
    for item in &items {
        if let Some((xs, vals)) = &item.density {
            let path = opts.out_dir.join("densities").join(format!("{}.csv", file_stem(&item.record.id)));
            write_density(&path, xs, vals, x_name)?;
        }
    }
    let records: Vec<FitRecord> = items.into_iter().map(|i| i.record).collect();
    write_json(&opts.out_dir.join("fits.json"), &records)?;
    for r in records.iter().filter(|r| r.error.is_some()) {
        log::warn!("fit of {} failed: {}", r.id, r.error.as_deref().unwrap_or(""));
    }
    if !records.is_empty() && records.iter().all(|r| r.fit.is_none()) {
        return Err(Error::AllFitsFailed);
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub model: PathBuf,
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub estimators: Vec<Estimator>,
    pub k: KChoice,
    pub loo: bool,
    pub return_periods: Vec<f64>,
    /// Upper stratum boundaries on sample size.
    pub strata: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub id: String,
    pub n_obs: usize,
    pub stratum: String,
    pub method: Estimator,
    /// Infinite when some held-out point received zero density.
    pub cross_entropy: Option<f64>,
    pub n_nonfinite: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevelRow {
    pub id: String,
    pub method: Estimator,
    pub t_years: f64,
    pub level: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: String,
    pub n: usize,
    pub n_nonfinite: usize,
    pub n_failed: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Estimator,
    /// Finite cross-entropies only.
    pub overall: Option<EvalReport>,
    pub n_nonfinite: usize,
    pub n_failed: usize,
    pub strata: Vec<StratumSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub log_scale: bool,
    pub methods: Vec<MethodSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateOutput {
    pub loo: Vec<LooRow>,
    pub return_levels: Vec<ReturnLevelRow>,
    pub summary: EvaluateSummary,
}

/// Label of the size stratum `(b_{i−1}, b_i]` containing `n`.
pub fn stratum_label(breaks: &[usize], n: usize) -> String {
    let mut lo = 0;
    for &b in breaks {
        if n <= b {
            return format!("({lo},{b}]");
        }
        lo = b;
    }
    format!("({lo},inf)")
}

fn loo_row(model: &Model, raw: &RawSubpop, est: Estimator, k: KChoice, stratum: &str) -> LooRow {
    let attempt = || -> Result<(f64, usize)> {
        let x = working_obs(model, &raw.obs)?;
        let fam = model.family();
        let out = loo_cross_entropy(|rest: &[f64]| Ok(fit_density(fam, rest, est, k)?.density), &x)?;
        // −log p_Y(y) = −log p_X(log y) + log y
        let jac = if model.is_log_scale() { x.iter().sum::<f64>() / x.len() as f64 } else { 0.0 };
        Ok((out.value + jac, out.n_nonfinite))
    };
    let (cross_entropy, n_nonfinite, error) = match attempt() {
        Ok((v, nf)) => (Some(v), nf, None),
        Err(e) => (None, 0, Some(e.to_string())),
    };
    LooRow {
        id: raw.id.clone(),
        n_obs: raw.obs.len(),
        stratum: stratum.to_string(),
        method: est,
        cross_entropy,
        n_nonfinite,
        error,
    }
}

fn return_level_rows(model: &Model, raw: &RawSubpop, est: Estimator, k: KChoice, periods: &[f64]) -> Vec<ReturnLevelRow> {
    let fitted = working_obs(model, &raw.obs).and_then(|x| fit_density(model.family(), &x, est, k));
    periods
        .iter()
        .map(|&t| {
            let level = fitted.as_ref().map_err(Clone::clone).and_then(|fd| match model {
                Model::Plain(_) => return_level(&fd.density, t),
                Model::LogScale(_) => ScaledDensity::from_log_density(&fd.density)?.return_level(t),
            });
            let (level, error) = match level {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ReturnLevelRow { id: raw.id.clone(), method: est, t_years: t, level, error }
        })
        .collect()
}

fn summarize_rows(rows: &[&LooRow]) -> (Option<(f64, f64, f64)>, usize, usize) {
    let finite: Vec<f64> = rows.iter().filter_map(|r| r.cross_entropy).filter(|v| v.is_finite()).collect();
    let nonfinite = rows.iter().filter(|r| r.cross_entropy.is_some_and(|v| !v.is_finite())).count();
    let failed = rows.iter().filter(|r| r.cross_entropy.is_none()).count();
    (summarize(&finite).ok(), nonfinite, failed)
}

/// Leave-one-out cross-entropies and return levels for every subpopulation
/// and estimator.
pub fn evaluate(model: &Model, raw: &[RawSubpop], opts: &EvaluateOptions) -> Result<EvaluateOutput> {
    let mut breaks = opts.strata.clone();
    breaks.sort_unstable();
    breaks.dedup();
    let jobs: Vec<(&RawSubpop, Estimator)> =
        opts.estimators.iter().flat_map(|&e| raw.iter().map(move |r| (r, e))).collect();
    let loo: Vec<LooRow> = if opts.loo {
        jobs.par_iter().map(|(r, e)| loo_row(model, r, *e, opts.k, &stratum_label(&breaks, r.obs.len()))).collect()
    } else {
        Vec::new()
    };
    let return_levels: Vec<ReturnLevelRow> = if opts.return_periods.is_empty() {
        Vec::new()
    } else {
        jobs.par_iter().flat_map(|(r, e)| return_level_rows(model, r, *e, opts.k, &opts.return_periods)).collect()
    };
    let mut methods = Vec::new();
    if opts.loo {
        for &est in &opts.estimators {
            let rows: Vec<&LooRow> = loo.iter().filter(|r| r.method == est).collect();
            let finite: Vec<(String, f64)> = rows
                .iter()
                .filter_map(|r| r.cross_entropy.filter(|v| v.is_finite()).map(|v| (r.id.clone(), v)))
                .collect();
            let (_, n_nonfinite, n_failed) = summarize_rows(&rows);
            let mut labels: Vec<String> = Vec::new();
            for r in &rows {
                if !labels.contains(&r.stratum) {
                    labels.push(r.stratum.clone());
                }
            }
            labels.sort_by_key(|l| stratum_order(l));
            let strata = labels
                .into_iter()
                .map(|label| {
                    let in_stratum: Vec<&LooRow> = rows.iter().copied().filter(|r| r.stratum == label).collect();
                    let (s, nf, nfail) = summarize_rows(&in_stratum);
                    StratumSummary {
                        stratum: label,
                        n: in_stratum.len(),
                        n_nonfinite: nf,
                        n_failed: nfail,
                        mean: s.map(|s| s.0),
                        median: s.map(|s| s.1),
                        sd: s.map(|s| s.2),
                    }
                })
                .collect();
            let overall = if finite.is_empty() { None } else { Some(EvalReport::from_values(finite)?) };
            methods.push(MethodSummary { method: est, overall, n_nonfinite, n_failed, strata });
        }
    }
    Ok(EvaluateOutput { loo, return_levels, summary: EvaluateSummary { log_scale: model.is_log_scale(), methods } })
}

fn stratum_order(label: &str) -> usize {
    label.trim_start_matches('(').split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn cmd_evaluate(opts: &EvaluateOptions) -> Result<EvaluateSummary> {
    let model = ModelFile::read(&opts.model)?.to_model()?;
    let raw = read_samples(&opts.input)?;
    let out = evaluate(&model, &raw, opts)?;
    if opts.loo {
        write_csv(
            &opts.out_dir.join("per_sample.csv"),
            &["subpop_id", "n_obs", "stratum", "method", "cross_entropy", "n_nonfinite", "error"],
            out.loo.iter().map(|r| {
                vec![
                    r.id.clone(),
                    r.n_obs.to_string(),
                    r.stratum.clone(),
                    r.method.to_string(),
                    fmt_opt(r.cross_entropy),
                    r.n_nonfinite.to_string(),
                    r.error.clone().unwrap_or_default(),
                ]
            }),
        )?;
    }
    if !opts.return_periods.is_empty() {
        write_csv(
            &opts.out_dir.join("return_levels.csv"),
            &["subpop_id", "method", "t_years", "level", "error"],
            out.return_levels.iter().map(|r| {
                vec![
                    r.id.clone(),
                    r.method.to_string(),
                    r.t_years.to_string(),
                    fmt_opt(r.level),
                    r.error.clone().unwrap_or_default(),
                ]
            }),
        )?;
    }
    write_json(&opts.out_dir.join("summary.json"), &out.summary)?;
    Ok(out.summary)
}
