//! Centred log transform between densities and unconstrained functions.

use crate::error::{Error, Result};
use crate::grid::{check_density, integrate, trapezoid, GridFn};

/// Largest log-range that can be exponentiated without losing the whole
/// density to underflow.
pub const MAX_LOG_RANGE: f64 = 700.0;

/// A log-density with zero integral over the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityFn {
    inner: GridFn,
}

impl LogDensityFn {
    /// Centres an arbitrary function so that it integrates to zero.
    pub fn centred(f: GridFn) -> Result<Self> {
        let c = integrate(&f) / f.domain().length();
        Ok(Self { inner: f.map(|v| v - c)? })
    }

    /// Wraps a function that is already centred. Used when reading stored
    /// models whose values must be preserved bit for bit.
    pub fn from_centred(f: GridFn) -> Result<Self> {
        let total = integrate(&f);
        let scale = f.values().iter().map(|v| v.abs()).fold(1.0, f64::max) * f.domain().length();
        if total.abs() > 1e-6 * scale {
            return Err(Error::InvalidArgument(format!("log-density not centred: integral {total}")));
        }
        Ok(Self { inner: f })
    }

    pub fn inner(&self) -> &GridFn {
        &self.inner
    }

    pub fn into_inner(self) -> GridFn {
        self.inner
    }

    pub fn values(&self) -> &[f64] {
        self.inner.values()
    }
}

/// `ψp = log p − |T|⁻¹ ∫ log p`.
pub fn clog_transform(p: &GridFn) -> Result<LogDensityFn> {
    if let Some(j) = p.values().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NonPositiveDensity { index: j, value: p.values()[j] });
    }
    check_density(p)?;
    LogDensityFn::centred(p.map(f64::ln)?)
}

/// Normalized `exp` of a log-density, applied in max-shifted form.
pub fn clog_inverse(f: &LogDensityFn) -> Result<GridFn> {
    exp_normalize(&f.inner)
}

pub(crate) fn exp_normalize(f: &GridFn) -> Result<GridFn> {
    let (lo, hi) = (f.min(), f.max());
    if hi - lo > MAX_LOG_RANGE {
        return Err(Error::Overflow(hi - lo));
    }
    let shifted: Vec<f64> = f.values().iter().map(|&v| (v - hi).exp()).collect();
    let z = trapezoid(f.domain().step(), &shifted);
    GridFn::new(*f.domain(), shifted.into_iter().map(|v| v / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain;
    use proptest::prelude::*;

    fn unit() -> Domain {
        Domain::new(0.0, 1.0, 512).unwrap()
    }

    fn normalized(f: GridFn) -> GridFn {
        let z = integrate(&f);
        f.map(|v| v / z).unwrap()
    }

    #[test]
    fn uniform_maps_to_zero() {
        let f = clog_transform(&GridFn::constant(unit(), 1.0).unwrap()).unwrap();
        assert!(f.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn exponential_density_maps_to_centred_line() {
        let p = normalized(GridFn::from_fn(unit(), f64::exp).unwrap());
        let f = clog_transform(&p).unwrap();
        for (j, v) in f.values().iter().enumerate() {
            assert!((v - (unit().point(j) - 0.5)).abs() < 1e-6);
        }
        assert!(integrate(f.inner()).abs() < 1e-12);
    }

    #[test]
    fn transform_errors() {
        let mut v = vec![1.0; 512];
        v[10] = 0.0;
        assert!(matches!(
            clog_transform(&GridFn::new(unit(), v).unwrap()),
            Err(Error::NonPositiveDensity { index: 10, .. })
        ));
        assert!(matches!(
            clog_transform(&GridFn::constant(unit(), 3.0).unwrap()),
            Err(Error::NotNormalized(_))
        ));
    }

    #[test]
    fn inverse_of_zero_is_uniform() {
        let d = Domain::new(-2.0, 3.0, 100).unwrap();
        let f = LogDensityFn::centred(GridFn::constant(d, 0.0).unwrap()).unwrap();
        let p = clog_inverse(&f).unwrap();
        assert!(p.values().iter().all(|v| (v - 0.2).abs() < 1e-14));
    }

    #[test]
    fn inverse_of_centred_line() {
        let f = LogDensityFn::centred(GridFn::from_fn(unit(), |t| t - 0.5).unwrap()).unwrap();
        let p = clog_inverse(&f).unwrap();
        let e = std::f64::consts::E;
        for (j, v) in p.values().iter().enumerate() {
            let t = unit().point(j);
            assert!((v - t.exp() / (e - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn inverse_overflow() {
        let f = LogDensityFn::centred(GridFn::from_fn(unit(), |t| 800.0 * t).unwrap()).unwrap();
        assert!(matches!(clog_inverse(&f), Err(Error::Overflow(_))));
        let f = LogDensityFn::centred(GridFn::from_fn(unit(), |t| 690.0 * t).unwrap()).unwrap();
        assert!(clog_inverse(&f).is_ok());
    }

    proptest! {
        #[test]
        fn round_trip_and_scale_invariance(
            raw in proptest::collection::vec(-4.0f64..4.0, 64),
            c in 0.01f64..100.0,
        ) {
            let d = Domain::new(-1.0, 1.0, 64).unwrap();
            let p = normalized(GridFn::new(d, raw.iter().map(|v| v.exp()).collect()).unwrap());
            let f = clog_transform(&p).unwrap();
            prop_assert!(integrate(f.inner()).abs() < 1e-6);
            let back = clog_inverse(&f).unwrap();
            for (a, b) in back.values().iter().zip(p.values()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            // ψ(c p) = ψ(p); c p is not normalized so centre directly
            let scaled = LogDensityFn::centred(p.map(|v| (c * v).ln()).unwrap()).unwrap();
            for (a, b) in scaled.values().iter().zip(f.values()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
