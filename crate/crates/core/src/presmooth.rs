//! Pilot density estimates for training subpopulations.
//!
//! The estimator is a Gaussian kernel density estimate whose value at `t`
//! is divided by the kernel mass that falls inside the domain, which removes
//! the usual boundary depression. A single bandwidth, the median of the
//! per-sample rule-of-thumb bandwidths, is shared by all training samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::{trapezoid, Domain, GridFn};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Observations from one subpopulation, kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopSample {
    id: String,
    obs: Vec<f64>,
}

impl SubpopSample {
    pub fn new(id: impl Into<String>, mut obs: Vec<f64>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(j) = obs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        obs.sort_by(f64::total_cmp);
        Ok(Self { id: id.into(), obs })
    }

    /// Like [`SubpopSample::new`] but also checks every observation lies in `domain`.
    pub fn within(id: impl Into<String>, obs: Vec<f64>, domain: &Domain) -> Result<Self> {
        let s = Self::new(id, obs)?;
        s.check_domain(domain)?;
        Ok(s)
    }

    pub fn check_domain(&self, domain: &Domain) -> Result<()> {
        self.obs.iter().try_for_each(|&x| domain.check_inside(x))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }

    pub fn size(&self) -> usize {
        self.obs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeConfig {
    pub bandwidth: f64,
    pub kernel: Kernel,
}

impl KdeConfig {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidBandwidth(bandwidth));
        }
        Ok(Self { bandwidth, kernel: Kernel::Gaussian })
    }
}

/// Kernel mass inside `[a, b]` for a kernel centred at `t`, i.e.
/// `∫_{(t-b)/h}^{(t-a)/h} κ(u) du`.
fn inside_mass(t: f64, a: f64, b: f64, h: f64) -> f64 {
    let upper = (t - a) / h;
    let lower = (t - b) / h;
    // Φ(upper) - Φ(lower) written with upper tails to avoid cancellation
    0.5 * (erfc(lower / std::f64::consts::SQRT_2) - erfc(upper / std::f64::consts::SQRT_2))
}

/// Boundary-weighted Gaussian KDE on the grid, normalized to unit integral.
pub fn weighted_kde(sample: &SubpopSample, cfg: &KdeConfig, domain: &Domain) -> Result<GridFn> {
    let h = cfg.bandwidth;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidBandwidth(h));
    }
    if sample.obs.is_empty() {
        return Err(Error::EmptySample);
    }
    let (a, b) = (domain.lo(), domain.hi());
    let obs = &sample.obs;
    let log_vals: Vec<f64> = (0..domain.n_grid())
        .map(|j| {
            let t = domain.point(j);
            let umin2 = obs
                .iter()
                .map(|&x| {
                    let u = (t - x) / h;
                    u * u
                })
                .fold(f64::INFINITY, f64::min);
            let s: f64 = obs
                .iter()
                .map(|&x| {
                    let u = (t - x) / h;
                    (-0.5 * (u * u - umin2)).exp()
                })
                .sum();
            -0.5 * umin2 + s.ln() - LN_SQRT_2PI - inside_mass(t, a, b, h).ln()
        })
        .collect();
    let peak = log_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = log_vals.iter().map(|&l| (l - peak).exp()).collect();
    let z = trapezoid(domain.step(), &shifted);
    let values = shifted.into_iter().map(|v| (v / z).max(f64::MIN_POSITIVE)).collect();
    GridFn::new(*domain, values)
}

/// Type-7 sample quantile of sorted data.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Rule-of-thumb bandwidth `0.9 min(sd, IQR/1.34) N^{-1/5}`.
///
/// When the interquartile range collapses but the standard deviation does
/// not, the standard deviation alone is used.
pub fn silverman_bandwidth(sample: &SubpopSample) -> Result<f64> {
    let x = &sample.obs;
    let n = x.len();
    if n < 2 {
        return Err(Error::ZeroSpread);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::ZeroSpread);
    }
    let iqr = sorted_quantile(x, 0.75) - sorted_quantile(x, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Median of the per-sample bandwidths; samples whose bandwidth is
/// undefined are skipped.
pub fn median_bandwidth(samples: &[SubpopSample]) -> Result<f64> {
    let mut hs: Vec<f64> = samples.iter().filter_map(|s| silverman_bandwidth(s).ok()).collect();
    if hs.is_empty() {
        return Err(Error::InvalidArgument("no sample admits a bandwidth".into()));
    }
    hs.sort_by(f64::total_cmp);
    let m = hs.len();
    Ok(if m % 2 == 1 { hs[m / 2] } else { 0.5 * (hs[m / 2 - 1] + hs[m / 2]) })
}

/// Pre-smooths every sample with a common bandwidth, in parallel.
pub fn presmooth_all(samples: &[SubpopSample], cfg: &KdeConfig, domain: &Domain) -> Result<Vec<GridFn>> {
    samples.par_iter().map(|s| weighted_kde(s, cfg, domain)).collect()
}
