//! Repeated density estimation.
//!
//! Many subpopulations each yield a sample from their own density. Densities
//! of well-sampled training subpopulations are pre-smoothed, mapped to
//! centred log-densities and decomposed by functional principal components.
//! The leading eigenfunctions span an exponential family in which new,
//! sparsely sampled subpopulations are fitted by maximum likelihood, by a
//! normal-prior MAP estimate, or by BLUP shrinkage toward the training mean.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod expfam;
pub mod fpca;
pub mod grid;
pub mod logmap;
pub mod metrics;
mod newton;
pub mod presmooth;
pub mod simgen;
pub mod tailscale;

pub use error::{Error, Result};
pub use estimators::{fit_blup, fit_map, fit_mle, select_k_aic, FitResult, Method};
pub use expfam::{BandwidthChoice, FamilyModel, MomentParam, NaturalParam, TrainConfig};
pub use grid::{Domain, GridFn};
pub use presmooth::SubpopSample;
