//! Log-scale wrapper for heavy-tailed positive data.
//!
//! Observations `Y > 0` are modelled through `X = log Y`. The family is
//! trained and fitted on the X scale; densities are mapped back by the
//! change of variables `p_Y(y) = p_X(log y) / y` on the exponential image of
//! the X grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit_with, select_k_aic, FitResult, Method};
use crate::expfam::{density, BandwidthChoice, FamilyModel, NaturalParam, TrainConfig};
use crate::grid::{cumulative_trapezoid, quantile_from_points, Domain, GridFn};
use crate::presmooth::SubpopSample;

/// Default padding added beyond the largest log observation.
pub const DEFAULT_DELTA: f64 = 0.5;

/// Settings for training on the log scale.
#[derive(Debug, Clone)]
pub struct ScaledTrainConfig {
    pub n_grid: usize,
    pub k_max: Option<usize>,
    pub bandwidth: BandwidthChoice,
    pub delta: f64,
}

/// A family trained on `log Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledModel {
    inner: FamilyModel,
    delta: f64,
}

impl ScaledModel {
    pub fn new(inner: FamilyModel, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { inner, delta })
    }

    pub fn inner(&self) -> &FamilyModel {
        &self.inner
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Support `[exp(lo), exp(hi)]` on the original scale.
    pub fn y_domain(&self) -> (f64, f64) {
        let d = self.inner.domain();
        (d.lo().exp(), d.hi().exp())
    }
}

/// `[0, max log Y + δ]`, or `[min log Y − δ, max log Y + δ]` when some
/// `Y < 1`.
pub fn log_domain(samples: &[SubpopSample], delta: f64, n_grid: usize) -> Result<Domain> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be positive, got {delta}")));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in samples {
        for &y in s.obs() {
            if !(y > 0.0) {
                return Err(Error::NonPositiveObservation(y));
            }
            lo = lo.min(y.ln());
            hi = hi.max(y.ln());
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptySample);
    }
    if lo >= 0.0 {
        Domain::new(0.0, hi + delta, n_grid)
    } else {
        log::warn!("observations below 1 present; log-scale domain starts at min log Y - delta = {}", lo - delta);
        Domain::new(lo - delta, hi + delta, n_grid)
    }
}

fn log_sample(s: &SubpopSample) -> Result<SubpopSample> {
    if let Some(&y) = s.obs().iter().find(|&&y| !(y > 0.0)) {
        return Err(Error::NonPositiveObservation(y));
    }
    SubpopSample::new(s.id(), s.obs().iter().map(|y| y.ln()).collect())
}

/// Trains the family on the log observations.
pub fn fit_scaled(train: &[SubpopSample], cfg: &ScaledTrainConfig) -> Result<ScaledModel> {
    let domain = log_domain(train, cfg.delta, cfg.n_grid)?;
    let logs = train.iter().map(log_sample).collect::<Result<Vec<_>>>()?;
    let tc = TrainConfig { domain, k_max: cfg.k_max, bandwidth: cfg.bandwidth };
    ScaledModel::new(FamilyModel::train(&logs, &tc)?, cfg.delta)
}

/// Log observations for fitting, with values beyond the trained domain
/// moved just inside it.
pub fn log_observations(m: &ScaledModel, obs_y: &[f64]) -> Result<Vec<f64>> {
    let d = m.inner.domain();
    let eps = 1e-9 * d.length();
    let mut clamped = 0;
    let out = obs_y
        .iter()
        .map(|&y| {
            if !(y > 0.0) || !y.is_finite() {
                return Err(Error::NonPositiveObservation(y));
            }
            let x = y.ln();
            Ok(if x > d.hi() {
                clamped += 1;
                d.hi() - eps
            } else if x < d.lo() {
                clamped += 1;
                d.lo() + eps
            } else {
                x
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if clamped > 0 {
        log::warn!("{clamped} observation(s) outside the trained log-scale domain were clamped to it");
    }
    Ok(out)
}

/// Fits a new Y-scale sample. `k = None` selects the dimension by AIC.
pub fn fit_scaled_sample(m: &ScaledModel, obs_y: &[f64], method: Method, k: Option<usize>) -> Result<FitResult> {
    let x = log_observations(m, obs_y)?;
    match k {
        Some(k) => fit_with(&m.inner, &x, method, k),
        None => select_k_aic(&m.inner, &x, method, m.inner.n_components()),
    }
}

/// A density on the non-uniform grid `y_j = exp(x_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledDensity {
    ys: Vec<f64>,
    values: Vec<f64>,
}

impl ScaledDensity {
    /// Change of variables from an X-scale density, renormalized under the
    /// trapezoid rule on the y-grid.
    pub fn from_log_density(p_x: &GridFn) -> Result<Self> {
        let ys: Vec<f64> = p_x.domain().points().iter().map(|x| x.exp()).collect();
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::Overflow(p_x.domain().hi()));
        }
        let raw: Vec<f64> = p_x.values().iter().zip(&ys).map(|(p, y)| p / y).collect();
        let z = *cumulative_trapezoid(&ys, &raw).last().expect("nonempty grid");
        if !(z > 0.0 && z.is_finite()) {
            return Err(Error::NotNormalized(z));
        }
        Ok(Self { ys, values: raw.into_iter().map(|v| v / z).collect() })
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn integrate(&self) -> f64 {
        *cumulative_trapezoid(&self.ys, &self.values).last().expect("nonempty grid")
    }

    pub fn quantile(&self, q: f64) -> Result<f64> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidArgument(format!("quantile level {q} not in (0, 1)")));
        }
        Ok(quantile_from_points(&self.ys, &self.values, q))
    }

    /// The `1 − 1/T` quantile on the original scale.
    pub fn return_level(&self, t_years: f64) -> Result<f64> {
        if !(t_years > 1.0) || !t_years.is_finite() {
            return Err(Error::InvalidArgument(format!("return period {t_years} must exceed 1")));
        }
        self.quantile(1.0 - 1.0 / t_years)
    }
}

/// `p_Y(y) ∝ exp(μ̂(log y) + Σ θ_k φ̂_k(log y)) / y`.
pub fn density_original_scale(m: &ScaledModel, theta: &NaturalParam) -> Result<ScaledDensity> {
    ScaledDensity::from_log_density(&density(&m.inner, theta)?)
}

/// Fits `obs_y` through the wrapper and directly on the X scale, checks the
/// natural parameters coincide, and returns them.
pub fn parameters_preserved(m: &ScaledModel, obs_y: &[f64], method: Method, k: usize) -> Result<NaturalParam> {
    let wrapped = fit_scaled_sample(m, obs_y, method, Some(k))?;
    let x: Vec<f64> = obs_y.iter().map(|y| y.ln()).collect();
    let direct = fit_with(&m.inner, &x, method, k)?;
    let gap = wrapped
        .theta
        .as_slice()
        .iter()
        .zip(direct.theta.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if gap > 1e-10 {
        return Err(Error::InvalidArgument(format!("log-scale fits disagree by {gap}")));
    }
    Ok(wrapped.theta)
}
