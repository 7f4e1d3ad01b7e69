//! Evaluation functionals: KL divergence, mean KL over test samples,
//! leave-one-out cross-entropy and return levels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{check_density, quantile_of_density, GridFn};

/// Points where `p` falls below this contribute nothing to the divergence.
const P_NEGLIGIBLE: f64 = 1e-14;

/// Per-sample values with summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<(String, f64)>,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (divisor `n − 1`); zero for one value.
    pub sd: f64,
}

impl EvalReport {
    pub fn from_values(per_sample: Vec<(String, f64)>) -> Result<Self> {
        let vals: Vec<f64> = per_sample.iter().map(|(_, v)| *v).collect();
        let (mean, median, sd) = summarize(&vals)?;
        Ok(Self { per_sample, mean, median, sd })
    }
}

/// Mean, median and sample standard deviation.
pub fn summarize(vals: &[f64]) -> Result<(f64, f64, f64)> {
    if vals.is_empty() {
        return Err(Error::EmptySample);
    }
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let mut sorted = vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let sd = if n > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Ok((mean, median, sd))
}

/// `∫ p log(p / q)` by the grid trapezoid rule.
pub fn kl_div(p: &GridFn, q: &GridFn) -> Result<f64> {
    if p.domain() != q.domain() {
        return Err(Error::DomainMismatch);
    }
    check_density(p)?;
    check_density(q)?;
    let step = p.domain().step();
    let n = p.values().len();
    let mut total = 0.0;
    for (j, (&a, &b)) in p.values().iter().zip(q.values()).enumerate() {
        if a < P_NEGLIGIBLE {
            continue;
        }
        if !(b > 0.0) {
            return Err(Error::InfiniteDivergence(j));
        }
        let w = if j == 0 || j == n - 1 { 0.5 * step } else { step };
        total += w * a * (a / b).ln();
    }
    Ok(total)
}

/// KL from each truth to its fit.
pub fn mean_kl(ids: &[String], truths: &[GridFn], fits: &[GridFn]) -> Result<EvalReport> {
    if truths.len() != fits.len() {
        return Err(Error::LengthMismatch(truths.len(), fits.len()));
    }
    if ids.len() != truths.len() {
        return Err(Error::LengthMismatch(ids.len(), truths.len()));
    }
    let kls = truths.par_iter().zip(fits).map(|(p, q)| kl_div(p, q)).collect::<Result<Vec<_>>>()?;
    EvalReport::from_values(ids.iter().cloned().zip(kls).collect())
}

/// Leave-one-out cross-entropy of a fitting procedure on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooOutcome {
    /// `−(1/N) Σ_j log p̂_{−j}(X_j)`; infinite when any held-out point
    /// gets zero density.
    pub value: f64,
    /// Held-out points with zero estimated density.
    pub n_nonfinite: usize,
}

impl LooOutcome {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// `−(1/N) Σ_j log p̂_{−j}(X_j)` where `fit` refits on all but `X_j`.
pub fn loo_cross_entropy<F>(fit: F, obs: &[f64]) -> Result<LooOutcome>
where
    F: Fn(&[f64]) -> Result<GridFn> + Sync,
{
    let n = obs.len();
    if n < 2 {
        return Err(Error::TooFewTrajectories { needed: 2, got: n });
    }
    let logs = (0..n)
        .into_par_iter()
        .map(|j| {
            let rest: Vec<f64> = obs[..j].iter().chain(&obs[j + 1..]).copied().collect();
            let p = fit(&rest).map_err(|e| Error::Refit { index: j, source: Box::new(e) })?;
            let v = p.eval(obs[j])?;
            Ok(if v > 0.0 { Some(v.ln()) } else { None })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_nonfinite = logs.iter().filter(|l| l.is_none()).count();
    let value = if n_nonfinite > 0 {
        f64::INFINITY
    } else {
        -logs.iter().map(|l| l.expect("finite")).sum::<f64>() / n as f64
    };
    Ok(LooOutcome { value, n_nonfinite })
}

/// The `1 − 1/T` quantile.
pub fn return_level(p: &GridFn, t_years: f64) -> Result<f64> {
    if !(t_years > 1.0) || !t_years.is_finite() {
        return Err(Error::InvalidArgument(format!("return period {t_years} must exceed 1")));
    }
    quantile_of_density(p, 1.0 - 1.0 / t_years)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{integrate, Domain};
    use crate::presmooth::{weighted_kde, KdeConfig, SubpopSample};
    use crate::simgen::sample_from_density;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn unit(n: usize) -> Domain {
        Domain::new(0.0, 1.0, n).unwrap()
    }

    fn normalized(f: GridFn) -> GridFn {
        let z = integrate(&f);
        f.map(|v| v / z).unwrap()
    }

    fn random_density(d: Domain, rng: &mut ChaCha8Rng) -> GridFn {
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        normalized(
            GridFn::from_fn(d, |t| (c[0] * t + c[1] * t * t + c[2] * (3.0 * t).sin() + c[3] * (5.0 * t).cos()).exp())
                .unwrap(),
        )
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_density(unit(256), &mut rng);
        assert!(kl_div(&p, &p).unwrap().abs() < 1e-10);
    }

    #[test]
    fn kl_uniform_against_linear() {
        // q(t) = 2t with the zero at t = 0 lifted to a tiny positive value;
        // the log singularity is integrable so a fine grid converges
        let d = unit(1_000_001);
        let p = GridFn::constant(d, 1.0).unwrap();
        let q = GridFn::from_fn(d, |t| (2.0 * t).max(1e-12)).unwrap();
        let q = normalized(q);
        let got = kl_div(&p, &q).unwrap();
        let want = 1.0 - 2f64.ln();
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn kl_errors() {
        let p = GridFn::constant(unit(64), 1.0).unwrap();
        let mut v = vec![64.0 / 63.0; 64];
        v[0] = 0.0;
        v[63] = 0.0;
        let q = normalized(GridFn::new(unit(64), v).unwrap());
        assert!(matches!(kl_div(&p, &q), Err(Error::InfiniteDivergence(0))));
        // where p vanishes, q may vanish too
        assert!(kl_div(&q, &normalized(q.clone())).unwrap().abs() < 1e-12);
        let other = GridFn::constant(Domain::new(0.0, 1.0, 65).unwrap(), 1.0).unwrap();
        assert_eq!(kl_div(&p, &other), Err(Error::DomainMismatch));
    }

    #[test]
    fn kl_zero_iff_equal_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = unit(128);
        for _ in 0..200 {
            let p = random_density(d, &mut rng);
            let q = random_density(d, &mut rng);
            let maxdiff = p.values().iter().zip(q.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let (a, b) = (kl_div(&p, &q).unwrap(), kl_div(&q, &p).unwrap());
            if maxdiff > 1e-3 {
                assert!(a > 1e-10 && b > 1e-10);
            }
        }
    }

    #[test]
    fn mean_kl_summaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = unit(128);
        let ps: Vec<GridFn> = (0..2).map(|_| random_density(d, &mut rng)).collect();
        let qs: Vec<GridFn> = (0..2).map(|_| random_density(d, &mut rng)).collect();
        let ids = vec!["a".to_string(), "b".to_string()];
        let same = mean_kl(&ids, &ps, &ps).unwrap();
        assert!(same.per_sample.iter().all(|(_, v)| v.abs() < 1e-10));
        let r = mean_kl(&ids, &ps, &qs).unwrap();
        let (a, b) = (kl_div(&ps[0], &qs[0]).unwrap(), kl_div(&ps[1], &qs[1]).unwrap());
        assert!((r.mean - 0.5 * (a + b)).abs() < 1e-12);
        assert!((r.median - r.mean).abs() < 1e-12);
        let one = mean_kl(&ids[..1], &ps[..1], &qs[..1]).unwrap();
        assert_eq!(one.mean, a);
        assert_eq!(one.sd, 0.0);
        assert!(mean_kl(&ids, &ps, &qs[..1]).is_err());
    }

    #[test]
    fn loo_of_uniform_fit_is_log_length() {
        let d = Domain::new(-2.0, 3.0, 100).unwrap();
        let fit = |_: &[f64]| GridFn::constant(d, 0.2);
        let r = loo_cross_entropy(fit, &[0.1, -1.0, 2.5, 0.0]).unwrap();
        assert!((r.value - 5f64.ln()).abs() < 1e-12);
        assert_eq!(r.n_nonfinite, 0);
        assert!(loo_cross_entropy(fit, &[0.1]).is_err());
    }

    #[test]
    fn loo_with_two_points() {
        let d = unit(256);
        let fit = |rest: &[f64]| {
            let m = rest[0];
            Ok(normalized(GridFn::from_fn(d, |t| (-(t - m).powi(2) / 0.02).exp()).unwrap()))
        };
        let obs = [0.3, 0.6];
        let r = loo_cross_entropy(fit, &obs).unwrap();
        let a = fit(&[0.6]).unwrap().eval(0.3).unwrap().ln();
        let b = fit(&[0.3]).unwrap().eval(0.6).unwrap().ln();
        assert!((r.value + 0.5 * (a + b)).abs() < 1e-12);
    }

    #[test]
    fn loo_kde_matches_hand_loop() {
        let d = unit(200);
        let obs = [0.12, 0.3, 0.31, 0.7, 0.95];
        let cfg = KdeConfig::gaussian(0.1).unwrap();
        let fit = |rest: &[f64]| weighted_kde(&SubpopSample::new("x", rest.to_vec())?, &cfg, &d);
        let r = loo_cross_entropy(fit, &obs).unwrap();
        let mut acc = 0.0;
        for j in 0..obs.len() {
            let mut rest = obs.to_vec();
            rest.remove(j);
            let p = weighted_kde(&SubpopSample::new("x", rest).unwrap(), &cfg, &d).unwrap();
            // linear interpolation written out
            let pos = obs[j] / d.step();
            let i = pos.floor() as usize;
            let s = pos - i as f64;
            acc += ((1.0 - s) * p.values()[i] + s * p.values()[i + 1]).ln();
        }
        assert!((r.value + acc / obs.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn loo_reports_failures() {
        let d = unit(64);
        let mut v = vec![1.0; 64];
        v[32..].iter_mut().for_each(|x| *x = 0.0);
        let half = normalized(GridFn::new(d, v).unwrap());
        let r = loo_cross_entropy(|_: &[f64]| Ok(half.clone()), &[0.1, 0.9, 0.95]).unwrap();
        assert_eq!(r.n_nonfinite, 2);
        assert!(!r.is_finite());
        let err = loo_cross_entropy(
            |rest: &[f64]| if rest.contains(&0.1) { Ok(half.clone()) } else { Err(Error::EmptySample) },
            &[0.1, 0.2],
        );
        assert!(matches!(err, Err(Error::Refit { index: 0, .. })));
    }

    #[test]
    fn loo_is_smallest_at_truth() {
        // two constant fits: the true density and a shifted one
        let d = Domain::new(-3.0, 3.0, 512).unwrap();
        let dens = |m: f64| normalized(GridFn::from_fn(d, |t| (-0.5 * (t - m).powi(2)).exp()).unwrap());
        let truth = dens(0.0);
        let wrong = dens(0.4);
        let reps = 200;
        let diffs: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let obs = sample_from_density(&truth, 30, 500 + r as u64).unwrap();
                let a = loo_cross_entropy(|_: &[f64]| Ok(truth.clone()), &obs).unwrap().value;
                let b = loo_cross_entropy(|_: &[f64]| Ok(wrong.clone()), &obs).unwrap().value;
                b - a
            })
            .collect();
        let (mean, _, sd) = summarize(&diffs).unwrap();
        assert!(mean > 3.0 * sd / (reps as f64).sqrt(), "{mean} {sd}");
    }

    #[test]
    fn return_levels() {
        let d = unit(1001);
        let u = GridFn::constant(d, 1.0).unwrap();
        assert!((return_level(&u, 2.0).unwrap() - 0.5).abs() < 1e-9);
        assert!((return_level(&u, 10.0).unwrap() - 0.9).abs() < 1e-9);
        assert!(return_level(&u, 1.0).is_err());
        // truncated normal on [−3, 3], inverted with the statrs CDF
        let g = Domain::new(-3.0, 3.0, 512).unwrap();
        let (mu, sigma) = (0.5, 1.2);
        let p = normalized(GridFn::from_fn(g, |t| (-0.5 * ((t - mu) / sigma).powi(2)).exp()).unwrap());
        let nd = Normal::new(mu, sigma).unwrap();
        let (flo, fhi) = (nd.cdf(-3.0), nd.cdf(3.0));
        for t in [2.0, 5.0, 10.0, 30.0] {
            let q = 1.0 - 1.0 / t;
            let want = nd.inverse_cdf(flo + q * (fhi - flo));
            assert!((return_level(&p, t).unwrap() - want).abs() <= 2.0 * g.step());
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = unit(96);
            let p = random_density(d, &mut rng);
            let q = random_density(d, &mut rng);
            prop_assert!(kl_div(&p, &q).unwrap() >= -1e-8);
        }

        #[test]
        fn return_level_monotone(seed in any::<u64>(), t1 in 1.01f64..100.0, t2 in 1.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_density(unit(96), &mut rng);
            let (a, b) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(return_level(&p, a).unwrap() <= return_level(&p, b).unwrap());
        }
    }
}
