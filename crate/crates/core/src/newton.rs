//! Damped Newton minimization for smooth strictly convex objectives.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the gradient.
    pub grad_tol: f64,
    /// Iterates beyond this max-norm are treated as divergence.
    pub max_abs_x: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-9, max_abs_x: 1e4 }
    }
}

pub(crate) trait ConvexObjective {
    fn value(&self, x: &DVector<f64>) -> Result<f64>;
    /// Value, gradient and Hessian.
    fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)>;
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
}

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;

/// Solves `H d = -g`, adding `1e-10 · trace` (growing tenfold on failure) to
/// the diagonal when `H` is not numerically positive definite.
pub(crate) fn regularized_newton_step(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = Cholesky::new(h.clone()) {
        let d = ch.solve(&(-g));
        if d.iter().all(|v| v.is_finite()) {
            return Ok(d);
        }
    }
    let trace = h.trace().abs().max(f64::MIN_POSITIVE);
    let mut ridge = 1e-10 * trace;
    for _ in 0..12 {
        let mut reg = h.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += ridge;
        }
        if let Some(ch) = Cholesky::new(reg) {
            let d = ch.solve(&(-g));
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d);
            }
        }
        ridge *= 10.0;
    }
    Err(Error::Singular("Newton system is not positive definite".into()))
}

pub(crate) fn minimize(obj: &impl ConvexObjective, x0: DVector<f64>, opts: NewtonOptions) -> Result<NewtonOutcome> {
    let mut x = x0;
    let (mut f, mut g, mut h) = obj.derivatives(&x)?;
    for iter in 0..opts.max_iter {
        let gnorm = g.amax();
        if gnorm < opts.grad_tol {
            return Ok(NewtonOutcome { x, iterations: iter });
        }
        let d = regularized_newton_step(&h, &g)?;
        let slope = g.dot(&d);
        let candidate = if -slope < 1e-12 * (1.0 + f.abs()) {
            // quadratic regime: the predicted decrease is below round-off, so
            // the full step is taken without a sufficient-decrease test
            &x + &d
        } else {
            let mut alpha = 1.0;
            loop {
                let trial = &x + alpha * &d;
                let ok = match obj.value(&trial) {
                    Ok(v) => v.is_finite() && v <= f + ARMIJO_C * alpha * slope,
                    Err(Error::Overflow(_)) => false,
                    Err(e) => return Err(e),
                };
                if ok {
                    break trial;
                }
                alpha *= 0.5;
                if alpha < MIN_STEP {
                    return Err(Error::NonConvergence { iterations: iter, grad_norm: gnorm });
                }
            }
        };
        if candidate.amax() > opts.max_abs_x {
            return Err(Error::NonConvergence { iterations: iter + 1, grad_norm: gnorm });
        }
        x = candidate;
        (f, g, h) = obj.derivatives(&x)?;
    }
    if g.amax() < opts.grad_tol {
        return Ok(NewtonOutcome { x, iterations: opts.max_iter });
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, grad_norm: g.amax() })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x) = Σ log(1 + e^{x_i}) - c·x + ½ x'Ax
    struct Smooth {
        c: DVector<f64>,
        a: DMatrix<f64>,
    }

    impl ConvexObjective for Smooth {
        fn value(&self, x: &DVector<f64>) -> Result<f64> {
            Ok(x.iter().map(|v| v.exp().ln_1p()).sum::<f64>() - self.c.dot(x) + 0.5 * x.dot(&(&self.a * x)))
        }

        fn derivatives(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
            let s = x.map(|v| 1.0 / (1.0 + (-v).exp()));
            let g = &s - &self.c + &self.a * x;
            let mut h = self.a.clone();
            for i in 0..x.len() {
                h[(i, i)] += s[i] * (1.0 - s[i]);
            }
            Ok((self.value(x)?, g, h))
        }
    }

    #[test]
    fn converges_from_far_start() {
        let obj = Smooth {
            c: DVector::from_vec(vec![0.3, 0.9, 0.5]),
            a: DMatrix::from_diagonal_element(3, 3, 1e-3),
        };
        let out = minimize(&obj, DVector::from_vec(vec![30.0, -40.0, 5.0]), NewtonOptions::default()).unwrap();
        let (_, g, _) = obj.derivatives(&out.x).unwrap();
        assert!(g.amax() < 1e-9);
    }

    #[test]
    fn divergence_detected() {
        // no minimizer: logistic loss with target outside (0, 1)
        let obj = Smooth { c: DVector::from_vec(vec![1.5]), a: DMatrix::zeros(1, 1) };
        let err = minimize(&obj, DVector::zeros(1), NewtonOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }

    #[test]
    fn singular_hessian_is_regularized() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let d = regularized_newton_step(&h, &g).unwrap();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(g.dot(&d) < 0.0);
    }
}
