//! Functions sampled on a uniform grid over a compact interval.
//!
//! Every density, log-density and eigenfunction in the crate is a [`GridFn`].
//! Integrals use the composite trapezoidal rule so that integration stays
//! exactly linear in the sampled values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of grid points.
pub const DEFAULT_N_GRID: usize = 512;

/// Smallest admissible grid.
pub const MIN_N_GRID: usize = 16;

/// Tolerance used when checking that a density integrates to one.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// A compact interval `[lo, hi]` with `n_grid` equally spaced points,
/// endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lo: f64,
    hi: f64,
    n_grid: usize,
}

impl Domain {
    pub fn new(lo: f64, hi: f64, n_grid: usize) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || hi <= lo {
            return Err(Error::InvalidDomain(format!("need finite lo < hi, got [{lo}, {hi}]")));
        }
        if n_grid < MIN_N_GRID {
            return Err(Error::InvalidDomain(format!(
                "n_grid must be at least {MIN_N_GRID}, got {n_grid}"
            )));
        }
        Ok(Self { lo, hi, n_grid })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    /// Interval length |T|.
    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    /// Grid spacing.
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n_grid - 1) as f64
    }

    /// The `j`-th grid point.
    pub fn point(&self, j: usize) -> f64 {
        if j + 1 == self.n_grid {
            self.hi
        } else {
            self.lo + j as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_grid).map(|j| self.point(j)).collect()
    }

    /// Trapezoidal quadrature weights.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.step();
        let mut w = vec![h; self.n_grid];
        w[0] = 0.5 * h;
        w[self.n_grid - 1] = 0.5 * h;
        w
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    /// Cell index `j` and fraction `s` in `[0, 1]` such that
    /// `x = (1 - s) t_j + s t_{j+1}`. Caller guarantees `x` is inside.
    pub(crate) fn locate(&self, x: f64) -> (usize, f64) {
        let u = (x - self.lo) / self.step();
        let last = self.n_grid - 2;
        if u <= 0.0 {
            return (0, 0.0);
        }
        let j = (u.floor() as usize).min(last);
        let s = (u - j as f64).clamp(0.0, 1.0);
        (j, s)
    }

    pub(crate) fn check_inside(&self, x: f64) -> Result<()> {
        if x.is_finite() && self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { value: x, lo: self.lo, hi: self.hi })
        }
    }
}

/// A real function represented by its values on a [`Domain`] grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFn {
    domain: Domain,
    values: Vec<f64>,
}

impl GridFn {
    pub fn new(domain: Domain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.n_grid() {
            return Err(Error::LengthMismatch(values.len(), domain.n_grid()));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(j));
        }
        Ok(Self { domain, values })
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(domain: Domain, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..domain.n_grid()).map(|j| f(domain.point(j))).collect();
        Self::new(domain, values)
    }

    pub fn constant(domain: Domain, c: f64) -> Result<Self> {
        Self::new(domain, vec![c; domain.n_grid()])
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Pointwise map, keeping the domain.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.domain, self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination of two functions on the same domain.
    pub fn zip_with(&self, other: &GridFn, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.domain != other.domain {
            return Err(Error::DomainMismatch);
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.domain, values)
    }

    /// Linear interpolation at an arbitrary point of the domain.
    pub fn eval(&self, x: f64) -> Result<f64> {
        self.domain.check_inside(x)?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> f64 {
        let (j, s) = self.domain.locate(x);
        (1.0 - s) * self.values[j] + s * self.values[j + 1]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Trapezoidal integral over the whole domain.
pub fn integrate(f: &GridFn) -> f64 {
    trapezoid(f.domain.step(), &f.values)
}

pub(crate) fn trapezoid(step: f64, values: &[f64]) -> f64 {
    let n = values.len();
    let interior: f64 = values[1..n - 1].iter().sum();
    step * (interior + 0.5 * (values[0] + values[n - 1]))
}

/// Trapezoidal L2 inner product.
pub fn inner(f: &GridFn, g: &GridFn) -> Result<f64> {
    if f.domain != g.domain {
        return Err(Error::DomainMismatch);
    }
    Ok(weighted_dot(f.domain.step(), &f.values, &g.values))
}

pub(crate) fn weighted_dot(step: f64, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let interior: f64 = a[1..n - 1].iter().zip(&b[1..n - 1]).map(|(x, y)| x * y).sum();
    step * (interior + 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]))
}

pub(crate) fn check_density(p: &GridFn) -> Result<f64> {
    if let Some(j) = p.values.iter().position(|&v| v < 0.0) {
        return Err(Error::NonPositiveDensity { index: j, value: p.values[j] });
    }
    let total = integrate(p);
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized(total));
    }
    Ok(total)
}

/// Cumulative trapezoid of a density evaluated at the grid points.
pub fn cdf(p: &GridFn) -> Vec<f64> {
    cumulative_trapezoid(&p.domain.points(), &p.values)
}

pub(crate) fn cumulative_trapezoid(xs: &[f64], ps: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    out.push(0.0);
    for j in 1..xs.len() {
        acc += 0.5 * (xs[j] - xs[j - 1]) * (ps[j] + ps[j - 1]);
        out.push(acc);
    }
    out
}

/// Smallest `t` with `CDF(t) >= q`, interpolating the CDF linearly inside
/// grid cells.
pub fn quantile_of_density(p: &GridFn, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {q} not in (0, 1)")));
    }
    check_density(p)?;
    Ok(quantile_from_points(&p.domain.points(), &p.values, q))
}

/// Quantile on an arbitrary increasing set of abscissae. The cumulative
/// trapezoid is rescaled to end at exactly one.
pub(crate) fn quantile_from_points(xs: &[f64], ps: &[f64], q: f64) -> f64 {
    let c = cumulative_trapezoid(xs, ps);
    let total = *c.last().expect("nonempty grid");
    let target = q * total;
    let j = c.partition_point(|&v| v < target);
    if j == 0 {
        return xs[0];
    }
    if j >= xs.len() {
        return xs[xs.len() - 1];
    }
    let (c0, c1) = (c[j - 1], c[j]);
    let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 1.0 };
    xs[j - 1] + frac * (xs[j] - xs[j - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit(n: usize) -> Domain {
        Domain::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn rejects_bad_domains() {
        assert!(Domain::new(1.0, 1.0, 100).is_err());
        assert!(Domain::new(0.0, 1.0, 15).is_err());
        assert!(Domain::new(0.0, f64::NAN, 100).is_err());
    }

    #[test]
    fn grid_points_hit_endpoints() {
        let d = Domain::new(-3.0, 3.0, 512).unwrap();
        assert_eq!(d.point(0), -3.0);
        assert_eq!(d.point(511), 3.0);
        assert!((d.point(1) - (-3.0 + 6.0 / 511.0)).abs() < 1e-15);
    }

    #[test]
    fn gridfn_rejects_nonfinite() {
        let d = unit(16);
        let mut v = vec![0.0; 16];
        v[3] = f64::NAN;
        assert_eq!(GridFn::new(d, v), Err(Error::NonFinite(3)));
    }

    #[test]
    fn integrate_constant_and_linear_exactly() {
        let d = unit(101);
        assert!((integrate(&GridFn::constant(d, 1.0).unwrap()) - 1.0).abs() < 1e-14);
        assert!((integrate(&GridFn::from_fn(d, |t| t).unwrap()) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn integrate_square_second_order() {
        // trapezoid error for t^2 on [0,1] is h^2/6
        let d = unit(1001);
        let v = integrate(&GridFn::from_fn(d, |t| t * t).unwrap());
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn inner_products() {
        let d = unit(1001);
        let zero = GridFn::constant(d, 0.0).unwrap();
        assert_eq!(inner(&zero, &zero).unwrap(), 0.0);
        let s = GridFn::from_fn(d, |t| (2.0 * PI * t).sin()).unwrap();
        let c = GridFn::from_fn(d, |t| (2.0 * PI * t).cos()).unwrap();
        assert!(inner(&s, &c).unwrap().abs() < 1e-8);
        let one = GridFn::constant(d, 1.0).unwrap();
        let t = GridFn::from_fn(d, |t| t).unwrap();
        assert!((inner(&one, &t).unwrap() - 0.5).abs() < 1e-14);
        let other = GridFn::constant(unit(100), 1.0).unwrap();
        assert_eq!(inner(&one, &other), Err(Error::DomainMismatch));
    }

    #[test]
    fn eval_interpolates_linearly() {
        let d = unit(21);
        let f = GridFn::from_fn(d, |t| 3.0 * t + 1.0).unwrap();
        assert!((f.eval(0.37).unwrap() - 2.11).abs() < 1e-12);
        assert_eq!(f.eval(1.0).unwrap(), 4.0);
        assert!(f.eval(1.01).is_err());
    }

    #[test]
    fn uniform_quantiles() {
        let p = GridFn::constant(unit(512), 1.0).unwrap();
        assert!((quantile_of_density(&p, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((quantile_of_density(&p, 0.9).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn quantile_rejects_unnormalized() {
        let p = GridFn::constant(unit(512), 2.0).unwrap();
        assert!(matches!(quantile_of_density(&p, 0.5), Err(Error::NotNormalized(_))));
        let p = GridFn::constant(unit(512), 1.0).unwrap();
        assert!(quantile_of_density(&p, 1.0).is_err());
    }

    /// Bisection on the closed-form truncated normal CDF.
    fn truncated_normal_quantile_oracle(q: f64) -> f64 {
        use statrs::function::erf::erf;
        let phi = |x: f64| 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
        let (a, b) = (phi(-3.0), phi(3.0));
        let cdf = |x: f64| (phi(x) - a) / (b - a);
        let (mut lo, mut hi) = (-3.0, 3.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn truncated_normal_quantile_matches_oracle() {
        let d = Domain::new(-3.0, 3.0, 512).unwrap();
        let raw = GridFn::from_fn(d, |t| (-0.5 * t * t).exp()).unwrap();
        let z = integrate(&raw);
        let p = raw.map(|v| v / z).unwrap();
        let got = quantile_of_density(&p, 0.975).unwrap();
        let want = truncated_normal_quantile_oracle(0.975);
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    proptest! {
        #[test]
        fn integration_is_linear(
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
            f in proptest::collection::vec(-5.0f64..5.0, 32),
            g in proptest::collection::vec(-5.0f64..5.0, 32),
        ) {
            let d = Domain::new(-1.0, 2.0, 32).unwrap();
            let fg = GridFn::new(d, f.clone()).unwrap();
            let gg = GridFn::new(d, g.clone()).unwrap();
            let comb = fg.zip_with(&gg, |x, y| a * x + b * y).unwrap();
            let lhs = integrate(&comb);
            let rhs = a * integrate(&fg) + b * integrate(&gg);
            prop_assert!((lhs - rhs).abs() < 1e-11 * (1.0 + lhs.abs()));
        }

        #[test]
        fn quantile_is_monotone_and_inverts_cdf(
            raw in proptest::collection::vec(0.01f64..5.0, 40),
            q1 in 0.001f64..0.999,
            q2 in 0.001f64..0.999,
            j in 1usize..39,
        ) {
            let d = Domain::new(0.0, 4.0, 40).unwrap();
            let f = GridFn::new(d, raw).unwrap();
            let z = integrate(&f);
            let p = f.map(|v| v / z).unwrap();
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            prop_assert!(quantile_of_density(&p, lo).unwrap() <= quantile_of_density(&p, hi).unwrap());
            let c = cdf(&p);
            if c[j] > 0.0 && c[j] < 1.0 {
                let t = quantile_of_density(&p, c[j]).unwrap();
                prop_assert!((t - d.point(j)).abs() <= d.step() + 1e-12);
            }
        }
    }
}
