//! Fitting a new subpopulation inside a trained family: maximum likelihood,
//! normal-prior MAP, and BLUP shrinkage of the moment coordinates, with AIC
//! choice of the number of components.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{
    check_moment_box, log_likelihood, log_normalizer, moment_map, solve_natural, suffstat_average, FamilyModel,
    MomentParam, NaturalParam,
};

/// Margin kept from the moment box when pulling an infeasible BLUP back.
const BOX_MARGIN: f64 = 1e-6;

/// Condition number above which the BLUP system is ridged.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Mle,
    Map,
    Blup,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mle, Method::Map, Method::Blup];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mle => "MLE",
            Method::Map => "MAP",
            Method::Blup => "BLUP",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mle" => Ok(Method::Mle),
            "map" => Ok(Method::Map),
            "blup" => Ok(Method::Blup),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Training-side quantities used for shrinkage at truncation `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageStats {
    /// Mean training moment coordinate.
    pub tau_bar: DVector<f64>,
    /// Covariance of the training moment coordinates.
    pub sigma_tau: DMatrix<f64>,
    /// Expected within-subpopulation covariance of a size-`N` sufficient
    /// statistic average.
    pub sigma_phibar: DMatrix<f64>,
    /// Sample variances of the training scores.
    pub score_vars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AicEntry {
    pub k: usize,
    /// `None` when the fit at this `k` failed.
    pub aic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub k: usize,
    pub theta: NaturalParam,
    pub xi: MomentParam,
    pub log_normalizer: f64,
    pub loglik: f64,
    pub aic_trace: Vec<AicEntry>,
    pub n_obs: usize,
}

impl FitResult {
    pub fn aic(&self) -> f64 {
        aic(self.k, self.loglik)
    }
}

fn aic(k: usize, loglik: f64) -> f64 {
    2.0 * k as f64 - 2.0 * loglik
}

/// Sample variances (divisor `n − 1`) of the first `k` training scores.
pub fn score_variances(model: &FamilyModel, k: usize) -> Result<Vec<f64>> {
    model.check_k(k)?;
    let scores = model.train_scores();
    let n = scores.len();
    if n < 2 {
        return Err(Error::TooFewTrajectories { needed: 2, got: n });
    }
    Ok((0..k)
        .map(|c| {
            let mean = scores.iter().map(|r| r[c]).sum::<f64>() / n as f64;
            scores.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect())
}

pub fn shrinkage_stats(model: &FamilyModel, k: usize, fit_n: usize) -> Result<ShrinkageStats> {
    model.check_k(k)?;
    let n = model.n_train();
    if n < 2 {
        return Err(Error::TooFewTrajectories { needed: 2, got: n });
    }
    if fit_n == 0 {
        return Err(Error::EmptySample);
    }
    let taus = model.train_moments(k)?;
    let tau_bar = DVector::from_fn(k, |a, _| taus.iter().map(|t| t[a]).sum::<f64>() / n as f64);
    let mut sigma_tau = DMatrix::zeros(k, k);
    for t in taus {
        let d = DVector::from_fn(k, |a, _| t[a] - tau_bar[a]);
        sigma_tau += &d * d.transpose();
    }
    sigma_tau /= (n - 1) as f64;

    let sigma_phibar = model.within_scatter(k)? / fit_n as f64;

    Ok(ShrinkageStats { tau_bar, sigma_tau, sigma_phibar, score_vars: score_variances(model, k)? })
}

fn finish(model: &FamilyModel, method: Method, theta: NaturalParam, obs: &[f64]) -> Result<FitResult> {
    let k = theta.len();
    let xi = moment_map(model, &theta)?;
    let b = log_normalizer(model, &theta)?;
    let loglik = log_likelihood(model, &theta, obs)?;
    Ok(FitResult {
        method,
        k,
        theta,
        xi,
        log_normalizer: b,
        loglik,
        aic_trace: vec![AicEntry { k, aic: Some(aic(k, loglik)) }],
        n_obs: obs.len(),
    })
}

fn start(theta0: Option<&[f64]>, k: usize) -> Vec<f64> {
    let mut t = vec![0.0; k];
    if let Some(t0) = theta0 {
        for (a, b) in t.iter_mut().zip(t0) {
            *a = *b;
        }
    }
    t
}

fn mle_from(model: &FamilyModel, obs: &[f64], k: usize, theta0: Option<&[f64]>) -> Result<FitResult> {
    let phibar = suffstat_average(model, obs, k)?;
    check_moment_box(model, &phibar)?;
    let theta = solve_natural(model, &phibar, None, &start(theta0, k))?;
    finish(model, Method::Mle, theta, obs)
}

/// Maximizes `θᵀφ̄ − B(θ)`.
pub fn fit_mle(model: &FamilyModel, obs: &[f64], k: usize) -> Result<FitResult> {
    mle_from(model, obs, k, None)
}

fn map_from(
    model: &FamilyModel,
    obs: &[f64],
    k: usize,
    prior_vars: &[f64],
    theta0: Option<&[f64]>,
) -> Result<FitResult> {
    let phibar = suffstat_average(model, obs, k)?;
    if prior_vars.len() < k {
        return Err(Error::DimensionMismatch { expected: k, got: prior_vars.len() });
    }
    if let Some(c) = prior_vars[..k].iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroPriorVariance(c + 1));
    }
    // full-sample log-likelihood plus log-prior, divided by N
    let n = obs.len() as f64;
    let precision = prior_vars[..k].iter().map(|v| 1.0 / (n * v)).collect();
    let theta = solve_natural(model, &phibar, Some(precision), &start(theta0, k))?;
    finish(model, Method::Map, theta, obs)
}

/// Maximizes `N(θᵀφ̄ − B(θ)) − ½ Σ θ_k² / s²_k` with the training score
/// variances as prior variances.
pub fn fit_map(model: &FamilyModel, obs: &[f64], k: usize) -> Result<FitResult> {
    let vars = score_variances(model, k)?;
    map_from(model, obs, k, &vars, None)
}

/// MAP fit with caller-supplied prior variances.
pub fn fit_map_with_prior(model: &FamilyModel, obs: &[f64], k: usize, prior_vars: &[f64]) -> Result<FitResult> {
    model.check_k(k)?;
    map_from(model, obs, k, prior_vars, None)
}

/// `Σ_τ (Σ_φ̄ + Σ_τ)⁻¹ (φ̄ − τ̄) + τ̄`, ridging the system when it is
/// badly conditioned.
pub fn blup_moment(stats: &ShrinkageStats, phibar: &[f64]) -> Result<DVector<f64>> {
    let k = stats.tau_bar.len();
    if phibar.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: phibar.len() });
    }
    let mut m = &stats.sigma_phibar + &stats.sigma_tau;
    let eig = SymmetricEigen::new(m.clone());
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if !(hi > 0.0) || lo <= 0.0 || hi / lo > MAX_CONDITION {
        let ridge = 1e-10 * m.trace() / k as f64;
        for i in 0..k {
            m[(i, i)] += ridge;
        }
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Singular("within plus between covariance is not positive definite".into()))?;
    let diff = DVector::from_fn(k, |a, _| phibar[a] - stats.tau_bar[a]);
    let x = chol.solve(&diff);
    let xi = &stats.sigma_tau * x + &stats.tau_bar;
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("BLUP produced non-finite moments".into()));
    }
    Ok(xi)
}

/// Largest `s ∈ [0, 1]` keeping `τ̄ + s(ξ − τ̄)` at least `BOX_MARGIN`
/// inside every coordinate range.
fn box_fraction(bounds: &[(f64, f64)], tau_bar: &DVector<f64>, xi: &DVector<f64>) -> f64 {
    let mut s: f64 = 1.0;
    for (a, &(lo, hi)) in bounds.iter().enumerate() {
        let (lo, hi) = (lo + BOX_MARGIN, hi - BOX_MARGIN);
        let d = xi[a] - tau_bar[a];
        if xi[a] > hi && d > 0.0 {
            s = s.min((hi - tau_bar[a]) / d);
        } else if xi[a] < lo && d < 0.0 {
            s = s.min((lo - tau_bar[a]) / d);
        }
    }
    s.clamp(0.0, 1.0)
}

fn blup_from(model: &FamilyModel, obs: &[f64], k: usize, theta0: Option<&[f64]>) -> Result<FitResult> {
    let phibar = suffstat_average(model, obs, k)?;
    let stats = shrinkage_stats(model, k, obs.len())?;
    let xi = blup_moment(&stats, &phibar)?;
    let bounds = model.moment_box(k);
    let mut s = box_fraction(&bounds, &stats.tau_bar, &xi);
    let t0 = start(theta0, k);
    let mut last_err = None;
    // τ̄ itself is always attainable; pull further toward it if the
    // box-feasible point still lies outside the attainable moment set
    for _ in 0..40 {
        let target: Vec<f64> = (0..k).map(|a| stats.tau_bar[a] + s * (xi[a] - stats.tau_bar[a])).collect();
        match solve_natural(model, &target, None, &t0) {
            Ok(theta) => return finish(model, Method::Blup, theta, obs),
            Err(e @ (Error::NonConvergence { .. } | Error::Overflow(_) | Error::Singular(_))) => {
                last_err = Some(e);
                s *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::AllFitsFailed))
}

/// BLUP of the moment coordinates mapped back to natural parameters.
pub fn fit_blup(model: &FamilyModel, obs: &[f64], k: usize) -> Result<FitResult> {
    blup_from(model, obs, k, None)
}

pub fn fit_with(model: &FamilyModel, obs: &[f64], method: Method, k: usize) -> Result<FitResult> {
    match method {
        Method::Mle => fit_mle(model, obs, k),
        Method::Map => fit_map(model, obs, k),
        Method::Blup => fit_blup(model, obs, k),
    }
}

/// Fits `k = 1..=k_max` and keeps the fit minimizing `2K − 2 log-likelihood`.
/// Each fit starts from the previous dimension's solution.
pub fn select_k_aic(model: &FamilyModel, obs: &[f64], method: Method, k_max: usize) -> Result<FitResult> {
    if k_max == 0 || k_max > model.n_components() {
        return Err(Error::ComponentOutOfRange { k: k_max, max: model.n_components() });
    }
    if obs.is_empty() {
        return Err(Error::EmptySample);
    }
    let prior = match method {
        Method::Map => Some(score_variances(model, k_max)?),
        _ => None,
    };
    let mut trace = Vec::with_capacity(k_max);
    let mut best: Option<FitResult> = None;
    let mut warm: Option<Vec<f64>> = None;
    for k in 1..=k_max {
        let t0 = warm.as_deref();
        let fit = match method {
            Method::Mle => mle_from(model, obs, k, t0),
            Method::Map => map_from(model, obs, k, prior.as_deref().expect("prior computed"), t0),
            Method::Blup => blup_from(model, obs, k, t0),
        };
        match fit {
            Ok(f) => {
                let a = f.aic();
                trace.push(AicEntry { k, aic: Some(a) });
                warm = Some(f.theta.as_slice().to_vec());
                if best.as_ref().is_none_or(|b| a < b.aic()) {
                    best = Some(f);
                }
            }
            Err(e @ (Error::EmptySample | Error::OutOfDomain { .. })) => return Err(e),
            Err(e) => {
                log::debug!("{method} fit at k = {k} failed: {e}");
                trace.push(AicEntry { k, aic: None });
            }
        }
    }
    let mut best = best.ok_or(Error::AllFitsFailed)?;
    best.aic_trace = trace;
    Ok(best)
}
