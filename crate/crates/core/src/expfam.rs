//! The K-dimensional exponential family spanned by the leading eigenfunctions.
//!
//! Members have log-density `μ̂ + Σ θ_k φ̂_k − B(θ)`. The log-normalizer `B`,
//! the moment map `ξ = ∇B` and the Fisher information `∇²B` are all computed
//! with the same trapezoidal weights, so they are exact derivatives of one
//! another in the discrete system.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::{fit_fpca, EigenSystem};
use crate::grid::{Domain, GridFn};
use crate::logmap::clog_transform;
use crate::newton::{minimize, ConvexObjective, NewtonOptions};
use crate::presmooth::{median_bandwidth, presmooth_all, KdeConfig, SubpopSample};

/// Pre-smoothed densities are floored here before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Default cap on the number of retained components.
pub const DEFAULT_K_MAX: usize = 20;

/// Natural parameter `θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NaturalParam(Vec<f64>);

impl NaturalParam {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if let Some(j) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        Ok(Self(theta))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn from_dvector(v: &DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }
}

/// Moment parameter `ξ = E_θ φ̂(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MomentParam(Vec<f64>);

impl MomentParam {
    pub fn new(xi: Vec<f64>) -> Result<Self> {
        if let Some(j) = xi.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        Ok(Self(xi))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How the shared pre-smoothing bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthChoice {
    /// Median of per-sample rule-of-thumb bandwidths.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub domain: Domain,
    /// Cap on retained components; defaults to `min(n - 1, 20)`.
    pub k_max: Option<usize>,
    pub bandwidth: BandwidthChoice,
}

/// Provenance of a trained family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub ids: Vec<String>,
    pub sizes: Vec<usize>,
    pub bandwidth: f64,
}

/// A trained approximating family together with what the shrinkage
/// estimators need from the training step.
#[derive(Debug)]
pub struct FamilyModel {
    sys: EigenSystem,
    presmoothed: Vec<GridFn>,
    meta: TrainMeta,
    /// Moment coordinates of the training scores, per truncation level.
    moments: Vec<OnceLock<Vec<Vec<f64>>>>,
    /// Average within-subpopulation scatter of the sufficient statistic,
    /// per truncation level.
    scatter: Vec<OnceLock<DMatrix<f64>>>,
}

impl Clone for FamilyModel {
    fn clone(&self) -> Self {
        Self::from_parts(self.sys.clone(), self.presmoothed.clone(), self.meta.clone())
            .expect("cloning a valid model")
    }
}

impl PartialEq for FamilyModel {
    fn eq(&self, other: &Self) -> bool {
        self.sys == other.sys && self.presmoothed == other.presmoothed && self.meta == other.meta
    }
}

impl FamilyModel {
    pub fn from_parts(sys: EigenSystem, presmoothed: Vec<GridFn>, meta: TrainMeta) -> Result<Self> {
        let n = sys.n_trajectories();
        if presmoothed.len() != n {
            return Err(Error::LengthMismatch(presmoothed.len(), n));
        }
        if meta.ids.len() != n || meta.sizes.len() != n {
            return Err(Error::LengthMismatch(meta.ids.len(), n));
        }
        if presmoothed.iter().any(|p| p.domain() != sys.domain()) {
            return Err(Error::DomainMismatch);
        }
        let moments = (0..sys.n_components()).map(|_| OnceLock::new()).collect();
        let scatter = (0..sys.n_components()).map(|_| OnceLock::new()).collect();
        Ok(Self { sys, presmoothed, meta, moments, scatter })
    }

    /// Training step: pre-smooth, log-transform, and decompose.
    pub fn train(samples: &[SubpopSample], cfg: &TrainConfig) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::TooFewTrajectories { needed: 2, got: n });
        }
        for s in samples {
            s.check_domain(&cfg.domain)?;
        }
        let h = match cfg.bandwidth {
            BandwidthChoice::Median => median_bandwidth(samples)?,
            BandwidthChoice::Fixed(h) => h,
        };
        let kde = KdeConfig::gaussian(h)?;
        let presmoothed: Vec<GridFn> = presmooth_all(samples, &kde, &cfg.domain)?
            .into_iter()
            .map(|p| p.map(|v| v.max(DENSITY_FLOOR)))
            .collect::<Result<_>>()?;
        let trajs = presmoothed.par_iter().map(clog_transform).collect::<Result<Vec<_>>>()?;
        let k_max = cfg.k_max.unwrap_or(DEFAULT_K_MAX).min(n - 1);
        let sys = fit_fpca(&trajs, k_max)?;
        let meta = TrainMeta {
            ids: samples.iter().map(|s| s.id().to_string()).collect(),
            sizes: samples.iter().map(SubpopSample::size).collect(),
            bandwidth: h,
        };
        Self::from_parts(sys, presmoothed, meta)
    }

    pub fn sys(&self) -> &EigenSystem {
        &self.sys
    }

    pub fn domain(&self) -> &Domain {
        self.sys.domain()
    }

    pub fn presmoothed(&self) -> &[GridFn] {
        &self.presmoothed
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub fn train_scores(&self) -> &[Vec<f64>] {
        self.sys.scores()
    }

    pub fn n_components(&self) -> usize {
        self.sys.n_components()
    }

    pub fn n_train(&self) -> usize {
        self.sys.n_trajectories()
    }

    pub(crate) fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_components() {
            return Err(Error::ComponentOutOfRange { k, max: self.n_components() });
        }
        Ok(())
    }

    fn check_dim(&self, k: usize) -> Result<()> {
        if k > self.n_components() {
            return Err(Error::ComponentOutOfRange { k, max: self.n_components() });
        }
        Ok(())
    }

    /// Moment coordinates `τ̂_i = ξ(η̂_i)` of the training scores truncated
    /// at `k`, computed once per `k`.
    pub fn train_moments(&self, k: usize) -> Result<&[Vec<f64>]> {
        self.check_k(k)?;
        let cell = &self.moments[k - 1];
        if let Some(m) = cell.get() {
            return Ok(m);
        }
        let computed = self
            .sys
            .scores()
            .par_iter()
            .map(|row| {
                let theta = NaturalParam::new(row[..k].to_vec())?;
                Ok(moment_map(self, &theta)?.0)
            })
            .collect::<Result<Vec<_>>>()?;
        let _ = cell.set(computed);
        Ok(cell.get().expect("just set"))
    }

    /// `n⁻¹ Σ_i ∫ (φ̂ − τ̂_i)(φ̂ − τ̂_i)ᵀ p̌_i` over the pre-smoothed training
    /// densities `p̌_i`, truncated at `k`.
    pub fn within_scatter(&self, k: usize) -> Result<&DMatrix<f64>> {
        self.check_k(k)?;
        let cell = &self.scatter[k - 1];
        if let Some(m) = cell.get() {
            return Ok(m);
        }
        let taus = self.train_moments(k)?;
        let w = self.domain().weights();
        let phis = &self.sys.eigfns()[..k];
        let n = self.n_train();
        let total = taus
            .par_iter()
            .zip(&self.presmoothed)
            .map(|(tau, p)| {
                let wp: Vec<f64> = w.iter().zip(p.values()).map(|(a, b)| a * b).collect();
                let centred: Vec<Vec<f64>> =
                    (0..k).map(|a| phis[a].values().iter().map(|v| v - tau[a]).collect()).collect();
                let mut m = DMatrix::zeros(k, k);
                for a in 0..k {
                    for b in 0..=a {
                        let v: f64 = (0..wp.len()).map(|j| wp[j] * centred[a][j] * centred[b][j]).sum();
                        m[(a, b)] = v;
                        m[(b, a)] = v;
                    }
                }
                m
            })
            .reduce(|| DMatrix::zeros(k, k), |a, b| a + b);
        let _ = cell.set(total / n as f64);
        Ok(cell.get().expect("just set"))
    }

    /// `μ̂ + Σ θ_k φ̂_k` on the grid.
    fn exponent(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(theta.len())?;
        let mut s = self.sys.mu().values().to_vec();
        for (t, phi) in theta.iter().zip(self.sys.eigfns()) {
            for (a, p) in s.iter_mut().zip(phi.values()) {
                *a += t * p;
            }
        }
        if let Some(j) = s.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        Ok(s)
    }

    /// Log-normalizer and quadrature-weighted probabilities `w_j p̂_θ(t_j)`.
    fn tilt(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s = self.exponent(theta)?;
        let peak = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = self.domain().weights();
        let mut probs: Vec<f64> = s.iter().zip(&w).map(|(v, wj)| wj * (v - peak).exp()).collect();
        let z: f64 = probs.iter().sum();
        let log_norm = peak + z.ln();
        if !log_norm.is_finite() {
            return Err(Error::Overflow(peak));
        }
        probs.iter_mut().for_each(|p| *p /= z);
        Ok((log_norm, probs))
    }

    /// First `k` eigenfunctions evaluated at `x` by linear interpolation.
    pub(crate) fn features_at(&self, x: f64, k: usize) -> Vec<f64> {
        self.sys.eigfns()[..k].iter().map(|phi| phi.eval_unchecked(x)).collect()
    }

    /// Per-component bounds of the sufficient statistic over the grid.
    pub(crate) fn moment_box(&self, k: usize) -> Vec<(f64, f64)> {
        self.sys.eigfns()[..k].iter().map(|phi| (phi.min(), phi.max())).collect()
    }
}

/// `B(θ) = log ∫ exp(μ̂ + Σ θ_k φ̂_k)`.
pub fn log_normalizer(model: &FamilyModel, theta: &NaturalParam) -> Result<f64> {
    Ok(model.tilt(theta.as_slice())?.0)
}

/// The family member `p̂_θ` on the grid.
pub fn density(model: &FamilyModel, theta: &NaturalParam) -> Result<GridFn> {
    let s = model.exponent(theta.as_slice())?;
    let b = log_normalizer(model, theta)?;
    GridFn::new(*model.domain(), s.iter().map(|v| (v - b).exp().max(f64::MIN_POSITIVE)).collect())
}

/// `ξ_k = ∫ φ̂_k p̂_θ`.
pub fn moment_map(model: &FamilyModel, theta: &NaturalParam) -> Result<MomentParam> {
    let (_, probs) = model.tilt(theta.as_slice())?;
    let xi = expectations(model, &probs, theta.len());
    MomentParam::new(xi)
}

fn expectations(model: &FamilyModel, probs: &[f64], k: usize) -> Vec<f64> {
    model.sys.eigfns()[..k]
        .iter()
        .map(|phi| phi.values().iter().zip(probs).map(|(p, w)| p * w).sum())
        .collect()
}

fn covariance(model: &FamilyModel, probs: &[f64], xi: &[f64]) -> DMatrix<f64> {
    let k = xi.len();
    let phis = &model.sys.eigfns()[..k];
    let mut m = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let (pa, pb) = (phis[a].values(), phis[b].values());
            let v: f64 = probs
                .iter()
                .enumerate()
                .map(|(j, w)| w * (pa[j] - xi[a]) * (pb[j] - xi[b]))
                .sum();
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// Hessian of `B`: covariance of the sufficient statistic under `p̂_θ`.
pub fn fisher_info(model: &FamilyModel, theta: &NaturalParam) -> Result<DMatrix<f64>> {
    let (_, probs) = model.tilt(theta.as_slice())?;
    let xi = expectations(model, &probs, theta.len());
    Ok(covariance(model, &probs, &xi))
}

/// `B(θ) − θᵀ target + ½ Σ precision_k θ_k²`.
pub(crate) struct DualObjective<'a> {
    pub model: &'a FamilyModel,
    pub target: Vec<f64>,
    pub precision: Option<Vec<f64>>,
}

impl DualObjective<'_> {
    fn penalty(&self, x: &DVector<f64>) -> f64 {
        match &self.precision {
            Some(p) => 0.5 * x.iter().zip(p).map(|(t, q)| q * t * t).sum::<f64>(),
            None => 0.0,
        }
    }
}

impl ConvexObjective for DualObjective<'_> {
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        let (b, _) = self.model.tilt(x.as_slice())?;
        let lin: f64 = x.iter().zip(&self.target).map(|(t, c)| t * c).sum();
        Ok(b - lin + self.penalty(x))
    }

    fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (b, probs) = self.model.tilt(x.as_slice())?;
        let xi = expectations(self.model, &probs, x.len());
        let mut h = covariance(self.model, &probs, &xi);
        let lin: f64 = x.iter().zip(&self.target).map(|(t, c)| t * c).sum();
        let mut g = DVector::from_iterator(x.len(), xi.iter().zip(&self.target).map(|(a, c)| a - c));
        if let Some(p) = &self.precision {
            for i in 0..x.len() {
                g[i] += p[i] * x[i];
                h[(i, i)] += p[i];
            }
        }
        Ok((b - lin + self.penalty(x), g, h))
    }
}

/// Checks `lo_k < ξ_k < hi_k` for the grid range of each `φ̂_k`.
pub(crate) fn check_moment_box(model: &FamilyModel, xi: &[f64]) -> Result<()> {
    for (k, ((lo, hi), &x)) in model.moment_box(xi.len()).into_iter().zip(xi).enumerate() {
        if !(x > lo && x < hi) {
            return Err(Error::NonExistence(format!(
                "moment {x} of component {} outside the open range ({lo}, {hi})",
                k + 1
            )));
        }
    }
    Ok(())
}

pub(crate) fn solve_natural(
    model: &FamilyModel,
    target: &[f64],
    precision: Option<Vec<f64>>,
    theta0: &[f64],
) -> Result<NaturalParam> {
    let obj = DualObjective { model, target: target.to_vec(), precision };
    let out = minimize(&obj, DVector::from_column_slice(theta0), NewtonOptions::default())?;
    log::trace!("Newton converged in {} iterations", out.iterations);
    NaturalParam::from_dvector(&out.x)
}

/// Inverts the moment map by minimizing `B(θ) − θᵀξ` from `theta0`.
pub fn natural_from_moment(model: &FamilyModel, xi: &MomentParam, theta0: &NaturalParam) -> Result<NaturalParam> {
    let k = xi.len();
    model.check_k(k)?;
    if theta0.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: theta0.len() });
    }
    check_moment_box(model, xi.as_slice())?;
    solve_natural(model, xi.as_slice(), None, theta0.as_slice())
}

/// Average of the first `k` eigenfunctions over the observations.
pub fn suffstat_average(model: &FamilyModel, obs: &[f64], k: usize) -> Result<Vec<f64>> {
    if obs.is_empty() {
        return Err(Error::EmptySample);
    }
    model.check_k(k)?;
    let domain = model.domain();
    let mut acc = vec![0.0; k];
    for &x in obs {
        domain.check_inside(x)?;
        for (a, f) in acc.iter_mut().zip(model.features_at(x, k)) {
            *a += f;
        }
    }
    acc.iter_mut().for_each(|a| *a /= obs.len() as f64);
    Ok(acc)
}

/// `Σ_j log p̂_θ(X_j)` with `μ̂` and `φ̂` interpolated at the observations.
pub fn log_likelihood(model: &FamilyModel, theta: &NaturalParam, obs: &[f64]) -> Result<f64> {
    let b = log_normalizer(model, theta)?;
    let k = theta.len();
    let mut total = 0.0;
    for &x in obs {
        model.domain().check_inside(x)?;
        let mu = model.sys.mu().inner().eval_unchecked(x);
        let lin: f64 = model.features_at(x, k).iter().zip(theta.as_slice()).map(|(f, t)| f * t).sum();
        total += mu + lin - b;
    }
    Ok(total)
}
