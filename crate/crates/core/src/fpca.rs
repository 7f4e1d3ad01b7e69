//! Functional principal components of centred log-densities.
//!
//! The covariance operator `Ĝ` is discretized with trapezoidal weights `W`.
//! Its nonzero spectrum is obtained from the `n × n` Gram matrix
//! `C W Cᵀ / n` of the centred trajectories `C`, which shares its nonzero
//! eigenvalues with `W^{1/2} Ĝ W^{1/2}`; an eigenvector `v` maps to the
//! eigenfunction `Cᵀ v / sqrt(n λ)`, orthonormal under the trapezoidal inner
//! product.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::{inner, weighted_dot, Domain, GridFn};
use crate::logmap::LogDensityFn;

/// Components whose eigenvalue falls below this fraction of the leading one
/// are treated as numerically null.
pub const RELATIVE_EIGEN_FLOOR: f64 = 1e-12;

/// Absolute floor relative to the mean squared norm of the trajectories.
const ABSOLUTE_EIGEN_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem {
    mu: LogDensityFn,
    eigvals: Vec<f64>,
    eigfns: Vec<GridFn>,
    /// `scores[i][k]` is the `k`-th score of training trajectory `i`.
    scores: Vec<Vec<f64>>,
}

impl EigenSystem {
    /// Assembles a system from stored parts, checking shapes, spectrum
    /// ordering and orthonormality.
    pub fn from_parts(
        mu: LogDensityFn,
        eigvals: Vec<f64>,
        eigfns: Vec<GridFn>,
        scores: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = eigvals.len();
        if eigfns.len() != k {
            return Err(Error::LengthMismatch(eigfns.len(), k));
        }
        if eigvals.iter().any(|&l| !(l >= 0.0)) || eigvals.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument("eigenvalues must be nonnegative and nonincreasing".into()));
        }
        let domain = *mu.inner().domain();
        if eigfns.iter().any(|f| *f.domain() != domain) {
            return Err(Error::DomainMismatch);
        }
        if let Some(row) = scores.iter().find(|r| r.len() != k) {
            return Err(Error::LengthMismatch(row.len(), k));
        }
        for a in 0..k {
            for b in 0..=a {
                let g = inner(&eigfns[a], &eigfns[b])?;
                let want = if a == b { 1.0 } else { 0.0 };
                if (g - want).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "eigenfunctions {a} and {b} not orthonormal (inner product {g})"
                    )));
                }
            }
        }
        Ok(Self { mu, eigvals, eigfns, scores })
    }

    pub fn domain(&self) -> &Domain {
        self.mu.inner().domain()
    }

    pub fn mu(&self) -> &LogDensityFn {
        &self.mu
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn eigfns(&self) -> &[GridFn] {
        &self.eigfns
    }

    pub fn scores(&self) -> &[Vec<f64>] {
        &self.scores
    }

    /// Number of retained components.
    pub fn n_components(&self) -> usize {
        self.eigvals.len()
    }

    pub fn n_trajectories(&self) -> usize {
        self.scores.len()
    }
}

/// Mean, covariance eigenpairs and scores of the trajectories, keeping at
/// most `k_max` components.
pub fn fit_fpca(trajs: &[LogDensityFn], k_max: usize) -> Result<EigenSystem> {
    let n = trajs.len();
    if n < 2 {
        return Err(Error::TooFewTrajectories { needed: 2, got: n });
    }
    if k_max == 0 || k_max > n - 1 {
        return Err(Error::ComponentOutOfRange { k: k_max, max: n - 1 });
    }
    let domain = *trajs[0].inner().domain();
    if trajs.iter().any(|f| *f.inner().domain() != domain) {
        return Err(Error::DomainMismatch);
    }
    let m = domain.n_grid();
    let step = domain.step();

    let mut mean = vec![0.0; m];
    for f in trajs {
        for (acc, v) in mean.iter_mut().zip(f.values()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mu = LogDensityFn::centred(GridFn::new(domain, mean.clone())?)?;

    let centred: Vec<Vec<f64>> = trajs
        .iter()
        .map(|f| f.values().iter().zip(&mean).map(|(v, c)| v - c).collect())
        .collect();

    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for l in 0..=i {
            let g = weighted_dot(step, &centred[i], &centred[l]) / n as f64;
            gram[(i, l)] = g;
            gram[(l, i)] = g;
        }
    }
    let energy = (0..n).map(|i| weighted_dot(step, trajs[i].values(), trajs[i].values())).sum::<f64>() / n as f64;

    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lead = eig.eigenvalues[order[0]].max(0.0);
    let floor = (RELATIVE_EIGEN_FLOOR * lead).max(ABSOLUTE_EIGEN_FLOOR * energy.max(f64::MIN_POSITIVE));

    let mut eigvals = Vec::new();
    let mut eigfns = Vec::new();
    for &idx in order.iter().take(k_max) {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > floor) {
            break;
        }
        let v = eig.eigenvectors.column(idx);
        let mut phi = vec![0.0; m];
        for i in 0..n {
            let vi = v[i];
            for (p, c) in phi.iter_mut().zip(&centred[i]) {
                *p += vi * c;
            }
        }
        let norm = weighted_dot(step, &phi, &phi).sqrt();
        phi.iter_mut().for_each(|p| *p /= norm);
        align_sign(&mut phi);
        eigvals.push(lambda);
        eigfns.push(GridFn::new(domain, phi)?);
    }

    let scores = centred
        .iter()
        .map(|c| eigfns.iter().map(|phi| weighted_dot(step, c, phi.values())).collect())
        .collect();

    Ok(EigenSystem { mu, eigvals, eigfns, scores })
}

/// Makes the entry of largest magnitude positive.
fn align_sign(phi: &mut [f64]) {
    let mut best = 0.0f64;
    for &p in phi.iter() {
        if p.abs() > best.abs() {
            best = p;
        }
    }
    if best < 0.0 {
        phi.iter_mut().for_each(|p| *p = -*p);
    }
}

/// Scores of `f` against the first `k` eigenfunctions.
pub fn project_scores(sys: &EigenSystem, f: &LogDensityFn, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > sys.n_components() {
        return Err(Error::ComponentOutOfRange { k, max: sys.n_components() });
    }
    if f.inner().domain() != sys.domain() {
        return Err(Error::DomainMismatch);
    }
    let step = sys.domain().step();
    let diff: Vec<f64> = f.values().iter().zip(sys.mu.values()).map(|(a, b)| a - b).collect();
    Ok(sys.eigfns[..k].iter().map(|phi| weighted_dot(step, &diff, phi.values())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::integrate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dom() -> Domain {
        Domain::new(0.0, 1.0, 128).unwrap()
    }

    fn random_trajs(n: usize, seed: u64) -> Vec<LogDensityFn> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
                let f = GridFn::from_fn(dom(), |t| {
                    c[0] * t + c[1] * t * t + c[2] * (6.0 * t).sin() + c[3] * (11.0 * t).cos()
                })
                .unwrap();
                LogDensityFn::centred(f).unwrap()
            })
            .collect()
    }

    #[test]
    fn input_checks() {
        let t = random_trajs(3, 1);
        assert!(matches!(fit_fpca(&t[..1], 1), Err(Error::TooFewTrajectories { .. })));
        assert!(matches!(fit_fpca(&t, 3), Err(Error::ComponentOutOfRange { .. })));
        assert!(matches!(fit_fpca(&t, 0), Err(Error::ComponentOutOfRange { .. })));
    }

    #[test]
    fn identical_trajectories_have_no_variation() {
        let f = random_trajs(1, 5).pop().unwrap();
        let sys = fit_fpca(&vec![f; 6], 5).unwrap();
        assert!(sys.eigvals().iter().all(|&l| l == 0.0));
        assert!(sys.scores().iter().flatten().all(|&s| s == 0.0));
    }

    #[test]
    fn rank_one_construction() {
        // g is unit-norm and centred under the trapezoid rule
        let g_raw = GridFn::from_fn(dom(), |t| (2.0 * std::f64::consts::PI * t).cos()).unwrap();
        let g = LogDensityFn::centred(g_raw).unwrap().into_inner();
        let nrm = inner(&g, &g).unwrap().sqrt();
        let g = g.map(|v| v / nrm).unwrap();
        let base = GridFn::from_fn(dom(), |t| t * t).unwrap();
        let cs = [-1.5, -0.5, 0.25, 0.75, 1.0];
        let trajs: Vec<_> = cs
            .iter()
            .map(|&c| LogDensityFn::centred(base.zip_with(&g, |b, gv| b + c * gv).unwrap()).unwrap())
            .collect();
        let sys = fit_fpca(&trajs, 4).unwrap();
        let mean_c = cs.iter().sum::<f64>() / 5.0;
        let var_c = cs.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / 5.0;
        assert_eq!(sys.n_components(), 1);
        assert!((sys.eigvals()[0] - var_c).abs() < 1e-6);
        let ip = inner(&sys.eigfns()[0], &g).unwrap();
        assert!((ip.abs() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn trace_identity_and_invariants() {
        let trajs = random_trajs(12, 7);
        let sys = fit_fpca(&trajs, 11).unwrap();
        let n = trajs.len() as f64;
        let diag = GridFn::from_fn(dom(), |_| 0.0).unwrap();
        let diag_vals: Vec<f64> = (0..dom().n_grid())
            .map(|j| trajs.iter().map(|f| (f.values()[j] - sys.mu().values()[j]).powi(2)).sum::<f64>() / n)
            .collect();
        let diag = GridFn::new(*diag.domain(), diag_vals).unwrap();
        let total: f64 = sys.eigvals().iter().sum();
        assert!((total - integrate(&diag)).abs() < 1e-4);

        assert!(sys.eigvals().windows(2).all(|w| w[0] >= w[1]));
        for (a, fa) in sys.eigfns().iter().enumerate() {
            for (b, fb) in sys.eigfns().iter().enumerate() {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((inner(fa, fb).unwrap() - want).abs() < 1e-6);
            }
            let peak = fa.values().iter().copied().max_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap();
            assert!(peak > 0.0);
        }
        for k in 0..sys.n_components() {
            let m = sys.scores().iter().map(|r| r[k]).sum::<f64>() / n;
            assert!(m.abs() < 1e-8);
        }
    }

    #[test]
    fn full_rank_reconstruction() {
        let trajs = random_trajs(5, 9);
        let sys = fit_fpca(&trajs, 4).unwrap();
        for (i, f) in trajs.iter().enumerate() {
            let mut rec = sys.mu().values().to_vec();
            for (k, phi) in sys.eigfns().iter().enumerate() {
                for (r, p) in rec.iter_mut().zip(phi.values()) {
                    *r += sys.scores()[i][k] * p;
                }
            }
            let err = GridFn::new(dom(), rec.iter().zip(f.values()).map(|(a, b)| (a - b).powi(2)).collect()).unwrap();
            assert!(integrate(&err).sqrt() < 1e-5);
        }
    }

    /// Power iteration with deflation on the m×m matrix W^{1/2} Ĝ W^{1/2}.
    fn power_iteration_eigvals(trajs: &[LogDensityFn], count: usize) -> Vec<f64> {
        let d = dom();
        let m = d.n_grid();
        let n = trajs.len() as f64;
        let w = d.weights();
        let mean: Vec<f64> = (0..m).map(|j| trajs.iter().map(|f| f.values()[j]).sum::<f64>() / n).collect();
        let mut a = vec![vec![0.0; m]; m];
        for f in trajs {
            for s in 0..m {
                for t in 0..m {
                    a[s][t] += (f.values()[s] - mean[s]) * (f.values()[t] - mean[t]) / n * (w[s] * w[t]).sqrt();
                }
            }
        }
        let mut out = Vec::new();
        for _ in 0..count {
            let mut v = vec![1.0 / (m as f64).sqrt(); m];
            v[0] += 0.1;
            let mut lambda = 0.0;
            for _ in 0..5000 {
                let mut next: Vec<f64> = (0..m).map(|s| (0..m).map(|t| a[s][t] * v[t]).sum()).collect();
                let nrm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
                next.iter_mut().for_each(|x| *x /= nrm);
                lambda = nrm;
                let diff: f64 = next.iter().zip(&v).map(|(x, y)| (x - y).abs()).sum();
                v = next;
                if diff < 1e-15 {
                    break;
                }
            }
            for s in 0..m {
                for t in 0..m {
                    a[s][t] -= lambda * v[s] * v[t];
                }
            }
            out.push(lambda);
        }
        out
    }

    #[test]
    fn eigenvalues_match_power_iteration_oracle() {
        let trajs = random_trajs(5, 21);
        let sys = fit_fpca(&trajs, 4).unwrap();
        let oracle = power_iteration_eigvals(&trajs, 3);
        for (got, want) in sys.eigvals().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn projection() {
        let trajs = random_trajs(8, 3);
        let sys = fit_fpca(&trajs, 7).unwrap();
        let k = sys.n_components();
        assert!(project_scores(&sys, sys.mu(), k).unwrap().iter().all(|s| s.abs() < 1e-12));
        let f = sys.mu().inner().zip_with(&sys.eigfns()[0], |m, p| m + 2.0 * p).unwrap();
        let s = project_scores(&sys, &LogDensityFn::centred(f).unwrap(), k).unwrap();
        assert!((s[0] - 2.0).abs() < 1e-8);
        assert!(s[1..].iter().all(|v| v.abs() < 1e-8));
        for (i, f) in trajs.iter().enumerate() {
            let s = project_scores(&sys, f, k).unwrap();
            for (a, b) in s.iter().zip(&sys.scores()[i]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(project_scores(&sys, &trajs[0], k + 1).is_err());
    }
}
