//! Seeded generators for the simulation scenarios.
//!
//! Each subpopulation draws from its own ChaCha stream of the master seed,
//! so output does not depend on how the work is scheduled.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cumulative_trapezoid, trapezoid, Domain, GridFn, DEFAULT_N_GRID};
use crate::presmooth::SubpopSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// `N(μ, σ²)` on `[−3, 3]`, `μ ∼ U(−2, 2)`, `σ ∼ U(2, 4)`.
    TruncNormal,
    /// `exp((4+θ)x − (26.5+θ)x² + 47x³ − 25x⁴)` on `[0, 1]`, `θ ∼ U(0, 10)`.
    Bimodal,
    /// Three-component Gaussian mixture on `[−3, 3]` with Dirichlet weights.
    GaussMixture,
    /// `A + ε` on `[−10, 10]` with `A ∼ N(0, 1)` and standard normal noise.
    RandInterceptNormal,
    /// As above with unit-variance `t₃` noise.
    RandInterceptT3,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::TruncNormal,
        ScenarioKind::Bimodal,
        ScenarioKind::GaussMixture,
        ScenarioKind::RandInterceptNormal,
        ScenarioKind::RandInterceptT3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::TruncNormal => "trunc_normal",
            ScenarioKind::Bimodal => "bimodal",
            ScenarioKind::GaussMixture => "gauss_mixture",
            ScenarioKind::RandInterceptNormal => "rand_intercept_normal",
            ScenarioKind::RandInterceptT3 => "rand_intercept_t3",
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            ScenarioKind::TruncNormal | ScenarioKind::GaussMixture => (-3.0, 3.0),
            ScenarioKind::Bimodal => (0.0, 1.0),
            ScenarioKind::RandInterceptNormal | ScenarioKind::RandInterceptT3 => (-10.0, 10.0),
        }
    }

    pub fn domain(&self, n_grid: usize) -> Result<Domain> {
        let (lo, hi) = self.bounds();
        Domain::new(lo, hi, n_grid)
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario {s:?}")))
    }
}

/// Sample size, fixed or discrete uniform on an inclusive range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeSpec {
    Fixed(usize),
    Range(usize, usize),
}

impl SizeSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            SizeSpec::Fixed(n) if n >= 1 => Ok(()),
            SizeSpec::Range(a, b) if a >= 1 && a <= b => Ok(()),
            _ => Err(Error::InvalidArgument(format!("invalid sample size {self:?}"))),
        }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        match *self {
            SizeSpec::Fixed(n) => n,
            SizeSpec::Range(a, b) => rng.random_range(a..=b),
        }
    }
}

impl FromStr for SizeSpec {
    type Err = Error;

    /// `"200"` or `"75-100"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("invalid size {s:?}"));
        let spec = match s.split_once(['-', ':']) {
            Some((a, b)) => SizeSpec::Range(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => SizeSpec::Fixed(s.trim().parse().map_err(|_| bad())?),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_train: usize,
    pub train_size: SizeSpec,
    pub n_test: usize,
    pub test_size: SizeSpec,
    pub seed: u64,
    pub n_grid: usize,
}

impl ScenarioSpec {
    /// Design sizes used in the simulation study for each scenario.
    pub fn standard(kind: ScenarioKind, seed: u64) -> Self {
        let (n_train, train_size, test_size) = match kind {
            ScenarioKind::TruncNormal => (50, SizeSpec::Fixed(200), SizeSpec::Fixed(10)),
            ScenarioKind::Bimodal => (50, SizeSpec::Fixed(200), SizeSpec::Fixed(50)),
            ScenarioKind::GaussMixture => (50, SizeSpec::Fixed(200), SizeSpec::Fixed(25)),
            ScenarioKind::RandInterceptNormal | ScenarioKind::RandInterceptT3 => {
                (100, SizeSpec::Range(75, 100), SizeSpec::Range(10, 20))
            }
        };
        Self { kind, n_train, train_size, n_test: 100, test_size, seed, n_grid: DEFAULT_N_GRID }
    }

    pub fn domain(&self) -> Result<Domain> {
        self.kind.domain(self.n_grid)
    }

    fn validate(&self) -> Result<()> {
        self.train_size.validate()?;
        self.test_size.validate()?;
        self.domain()?;
        Ok(())
    }
}

/// One realized random density.
#[derive(Debug, Clone)]
pub(crate) struct Member {
    pub truth: GridFn,
    /// Random intercept, for the random-intercept scenarios.
    pub intercept: Option<f64>,
    t3: bool,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub train: Vec<SubpopSample>,
    pub test: Vec<(SubpopSample, GridFn)>,
}

/// Normalizes `exp(log_values)` under the grid trapezoid rule.
fn from_log(domain: Domain, logs: Vec<f64>) -> Result<GridFn> {
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vals: Vec<f64> = logs.iter().map(|v| (v - peak).exp()).collect();
    let z = trapezoid(domain.step(), &vals);
    GridFn::new(domain, vals.into_iter().map(|v| (v / z).max(f64::MIN_POSITIVE)).collect())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `t₃` draw: normal over `√(χ²₃ / 3)`.
fn t3(rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let chi: f64 = (0..3).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
    z / (chi / 3.0).sqrt()
}

impl Member {
    pub(crate) fn draw(kind: ScenarioKind, domain: Domain, rng: &mut impl Rng) -> Result<Self> {
        let xs = domain.points();
        let plain = |logs: Vec<f64>| -> Result<Self> { Ok(Self { truth: from_log(domain, logs)?, intercept: None, t3: false }) };
        match kind {
            ScenarioKind::TruncNormal => {
                let mu = rng.random_range(-2.0..2.0);
                let sigma = rng.random_range(2.0..4.0);
                plain(xs.iter().map(|x| -0.5 * ((x - mu) / sigma).powi(2)).collect())
            }
            ScenarioKind::Bimodal => {
                let th = rng.random_range(0.0..10.0);
                plain(bimodal_exponent(th, &xs))
            }
            ScenarioKind::GaussMixture => {
                let gamma = Gamma::new(1.0 / 3.0, 1.0).expect("valid shape");
                let raw: Vec<f64> = (0..3).map(|_| gamma.sample(rng)).collect();
                let total: f64 = raw.iter().sum();
                let comps: Vec<(f64, f64, f64)> = raw
                    .iter()
                    .map(|g| (g / total, rng.random_range(-5.0..5.0), rng.random_range(0.5..5.0)))
                    .collect();
                // log Σ θ_l φ((x − μ_l)/σ_l), up to a constant
                plain(
                    xs.iter()
                        .map(|x| {
                            let terms: Vec<f64> =
                                comps.iter().map(|(w, m, s)| w.ln() - 0.5 * ((x - m) / s).powi(2)).collect();
                            log_sum_exp(&terms)
                        })
                        .collect(),
                )
            }
            ScenarioKind::RandInterceptNormal | ScenarioKind::RandInterceptT3 => {
                let a: f64 = rng.sample(StandardNormal);
                let t3 = kind == ScenarioKind::RandInterceptT3;
                let logs = xs
                    .iter()
                    .map(|x| {
                        let u = x - a;
                        if t3 {
                            -2.0 * (u * u / 3.0).ln_1p()
                        } else {
                            -0.5 * u * u
                        }
                    })
                    .collect();
                Ok(Self { truth: from_log(domain, logs)?, intercept: Some(a), t3 })
            }
        }
    }

    /// `n` observations from this member.
    pub(crate) fn observe(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match self.intercept {
            // drawn from the model itself, rejecting the negligible mass
            // outside the domain
            Some(a) => {
                let d = self.truth.domain();
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let e = if self.t3 { t3(rng) } else { rng.sample(StandardNormal) };
                    let x = a + e;
                    if d.contains(x) {
                        out.push(x);
                    }
                }
                out
            }
            None => InverseCdf::new(&self.truth).sample(n, rng),
        }
    }
}

pub(crate) fn bimodal_exponent(theta: f64, xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| (4.0 + theta) * x - (26.5 + theta) * x * x + 47.0 * x.powi(3) - 25.0 * x.powi(4))
        .collect()
}

/// Inverse of the cumulative trapezoid, linear inside each cell.
pub(crate) struct InverseCdf {
    xs: Vec<f64>,
    cum: Vec<f64>,
}

impl InverseCdf {
    pub(crate) fn new(p: &GridFn) -> Self {
        let xs = p.domain().points();
        let cum = cumulative_trapezoid(&xs, p.values());
        Self { xs, cum }
    }

    pub(crate) fn at(&self, u: f64) -> f64 {
        let total = *self.cum.last().expect("nonempty grid");
        let target = u * total;
        let j = self.cum.partition_point(|&v| v < target);
        if j == 0 {
            return self.xs[0];
        }
        if j >= self.xs.len() {
            return self.xs[self.xs.len() - 1];
        }
        let (c0, c1) = (self.cum[j - 1], self.cum[j]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 1.0 };
        self.xs[j - 1] + frac * (self.xs[j] - self.xs[j - 1])
    }

    pub(crate) fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| self.at(rng.random::<f64>())).collect()
    }
}

/// `n` inverse-CDF draws from a density on the grid.
pub fn sample_from_density(p: &GridFn, n: usize, seed: u64) -> Result<Vec<f64>> {
    if let Some(j) = p.values().iter().position(|&v| v < 0.0) {
        return Err(Error::NonPositiveDensity { index: j, value: p.values()[j] });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(InverseCdf::new(p).sample(n, &mut rng))
}

/// Substream `stream` of the master seed.
pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Training samples and test samples with their true densities.
pub fn generate(spec: &ScenarioSpec) -> Result<Generated> {
    spec.validate()?;
    let domain = spec.domain()?;
    let one = |stream: u64, size: SizeSpec| -> Result<(Vec<f64>, GridFn)> {
        let mut rng = substream(spec.seed, stream);
        let m = Member::draw(spec.kind, domain, &mut rng)?;
        let n = size.draw(&mut rng);
        Ok((m.observe(n, &mut rng), m.truth))
    };
    let train = (0..spec.n_train)
        .into_par_iter()
        .map(|i| {
            let (obs, _) = one(i as u64, spec.train_size)?;
            SubpopSample::within(format!("train_{i:04}"), obs, &domain)
        })
        .collect::<Result<Vec<_>>>()?;
    let test = (0..spec.n_test)
        .into_par_iter()
        .map(|l| {
            let (obs, truth) = one((spec.n_train + l) as u64, spec.test_size)?;
            Ok((SubpopSample::within(format!("test_{l:04}"), obs, &domain)?, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::integrate;
    use crate::presmooth::median_bandwidth;

    #[test]
    fn parsing() {
        assert_eq!("bimodal".parse::<ScenarioKind>().unwrap(), ScenarioKind::Bimodal);
        assert!("normal".parse::<ScenarioKind>().is_err());
        assert_eq!("200".parse::<SizeSpec>().unwrap(), SizeSpec::Fixed(200));
        assert_eq!("75-100".parse::<SizeSpec>().unwrap(), SizeSpec::Range(75, 100));
        assert!("0".parse::<SizeSpec>().is_err());
        assert!("9-3".parse::<SizeSpec>().is_err());
    }

    #[test]
    fn trunc_normal_is_symmetric_at_zero_mean() {
        let d = ScenarioKind::TruncNormal.domain(512).unwrap();
        let p = from_log(d, d.points().iter().map(|x| -0.5 * (x / 2.0).powi(2)).collect()).unwrap();
        let n = d.n_grid();
        for j in 0..n {
            assert!((p.values()[j] - p.values()[n - 1 - j]).abs() < 1e-10);
        }
    }

    #[test]
    fn bimodal_modes_match_grid_scan() {
        let d = ScenarioKind::Bimodal.domain(512).unwrap();
        let p = from_log(d, bimodal_exponent(0.0, &d.points())).unwrap();
        let local_max = |v: &[f64]| -> Vec<usize> { (1..v.len() - 1).filter(|&j| v[j] > v[j - 1] && v[j] >= v[j + 1]).collect() };
        let modes: Vec<f64> = local_max(p.values()).into_iter().map(|j| d.point(j)).collect();
        // dense scan of the quartic exponent itself
        let fine: Vec<f64> = (0..=200_000).map(|i| i as f64 / 200_000.0).collect();
        let e = bimodal_exponent(0.0, &fine);
        let want: Vec<f64> = local_max(&e).into_iter().map(|i| fine[i]).collect();
        assert_eq!(modes.len(), 2);
        assert_eq!(want.len(), 2);
        for (a, b) in modes.iter().zip(&want) {
            assert!((a - b).abs() <= d.step(), "{a} vs {b}");
        }
    }

    #[test]
    fn truths_are_normalized_and_positive() {
        for kind in ScenarioKind::ALL {
            let d = kind.domain(512).unwrap();
            let mut rng = substream(11, 0);
            for _ in 0..50 {
                let m = Member::draw(kind, d, &mut rng).unwrap();
                assert!((integrate(&m.truth) - 1.0).abs() < 1e-8);
                assert!(m.truth.min() > 0.0);
            }
        }
    }

    #[test]
    fn random_intercept_mean_concentrates() {
        let d = ScenarioKind::RandInterceptNormal.domain(512).unwrap();
        let hits = (0..100u64)
            .into_par_iter()
            .filter(|&r| {
                let mut rng = substream(3, r);
                let m = Member::draw(ScenarioKind::RandInterceptNormal, d, &mut rng).unwrap();
                let x = m.observe(10_000, &mut rng);
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                (mean - m.intercept.unwrap()).abs() < 0.05
            })
            .count();
        assert!(hits >= 95, "{hits}");
    }

    #[test]
    fn t3_noise_matches_student_t_cdf() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let mut rng = substream(5, 0);
        let n = 20_000;
        let mut e: Vec<f64> = (0..n).map(|_| t3(&mut rng)).collect();
        e.sort_by(f64::total_cmp);
        let oracle = StudentsT::new(0.0, 1.0, 3.0).unwrap();
        let ks = e
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = oracle.cdf(v);
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "{ks}");
    }

    #[test]
    fn t3_truth_has_student_t_shape() {
        use statrs::distribution::{Continuous, StudentsT};
        let spec = ScenarioSpec { n_train: 1, n_test: 0, ..ScenarioSpec::standard(ScenarioKind::RandInterceptT3, 3) };
        let d = spec.domain().unwrap();
        let mut rng = substream(3, 0);
        let m = Member::draw(ScenarioKind::RandInterceptT3, d, &mut rng).unwrap();
        let a = m.intercept.unwrap();
        let oracle = StudentsT::new(a, 1.0, 3.0).unwrap();
        let mass: f64 = {
            use statrs::distribution::ContinuousCDF;
            oracle.cdf(d.hi()) - oracle.cdf(d.lo())
        };
        for (j, x) in d.points().iter().enumerate().step_by(37) {
            let want = oracle.pdf(*x) / mass;
            assert!((m.truth.values()[j] - want).abs() < 1e-6 * want.max(1.0), "{x}");
        }
    }

    #[test]
    fn uniform_sampling_passes_ks_bound() {
        let d = Domain::new(0.0, 1.0, 512).unwrap();
        let p = GridFn::constant(d, 1.0).unwrap();
        let n = 10_000;
        let mut x = sample_from_density(&p, n, 42).unwrap();
        x.sort_by(f64::total_cmp);
        let ks = x
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - v).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "{ks}");
        assert!(sample_from_density(&p, 0, 1).unwrap().is_empty());
        assert_eq!(sample_from_density(&p, 50, 9).unwrap(), sample_from_density(&p, 50, 9).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = ScenarioSpec::standard(ScenarioKind::RandInterceptT3, 17);
        spec.n_train = 5;
        spec.n_test = 4;
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        for ((sa, ta), (sb, tb)) in a.test.iter().zip(&b.test) {
            assert_eq!(sa, sb);
            assert_eq!(ta.values(), tb.values());
        }
        assert!(a.train.iter().all(|s| (75..=100).contains(&s.size())));
        assert!(a.test.iter().all(|(s, _)| (10..=20).contains(&s.size())));
        spec.seed = 18;
        assert_ne!(generate(&spec).unwrap().train, a.train);
    }

    #[test]
    fn median_bandwidth_is_sane_for_trunc_normal() {
        let mut spec = ScenarioSpec::standard(ScenarioKind::TruncNormal, 1);
        spec.n_test = 1;
        let g = generate(&spec).unwrap();
        let h = median_bandwidth(&g.train).unwrap();
        // the underlying spread is about 1.5, so Silverman at N = 200 is near 0.45
        let reference = 0.9 * 1.5 * 200f64.powf(-0.2);
        assert!(h > reference / 3.0 && h < reference * 3.0, "{h}");
    }
}
