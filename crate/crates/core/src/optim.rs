//! BFGS with a monotone Armijo backtracking line search.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop when the gradient 2-norm falls below this.
    pub gtol: f64,
    /// Relative objective change treated as stagnation.
    pub ftol: f64,
    /// Cap on the length of a trial step.
    pub max_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            gtol: 1e-6,
            ftol: 1e-14,
            max_step: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub gnorm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step (starting point first).
    pub history: Vec<f64>,
}

/// Minimize `f`, which returns the value and gradient. Evaluation errors at
/// trial points are treated as +∞ so the line search backs away from them;
/// an error at the starting point is returned.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = f(x0)?;
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut history = vec![fx];
    let mut stalls = 0;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        if g.norm() < opts.gtol {
            break;
        }
        iterations += 1;
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            fresh = true;
            d = -g.clone();
            slope = g.dot(&d);
        }
        let dn = d.norm();
        if dn > opts.max_step {
            d *= opts.max_step / dn;
            slope *= opts.max_step / dn;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt = &x + &d * t;
            if let Ok((ft, gt)) = f(xt.as_slice()) {
                if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                    accepted = Some((xt, ft, DVector::from_vec(gt)));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if fresh {
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        let rel = (fx - fnew).abs() / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        history.push(fx);

        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * (1.0 + rho * yhy)) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }

        if rel < opts.ftol {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let gnorm = g.norm();
    Ok(OptimResult {
        x: x.as_slice().to_vec(),
        f: fx,
        grad: g.as_slice().to_vec(),
        gnorm,
        iterations,
        converged: gnorm < opts.gtol,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((v, g))
        };
        let r = minimize(f, &[-1.2, 1.0], &OptimOptions::default()).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_one_step_family() {
        let f = |x: &[f64]| Ok((0.5 * (x[0] - 3.0).powi(2), vec![x[0] - 3.0]));
        let r = minimize(f, &[0.0], &OptimOptions::default()).unwrap();
        assert!(r.converged && (r.x[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn errors_are_avoided() {
        let f = |x: &[f64]| {
            if x[0] > 2.0 {
                Err(crate::Error::BadParam("outside".into()))
            } else {
                Ok(((x[0] - 1.0).powi(2), vec![2.0 * (x[0] - 1.0)]))
            }
        };
        let r = minimize(f, &[-3.0], &OptimOptions::default()).unwrap();
        assert!(r.converged && (r.x[0] - 1.0).abs() < 1e-6);
    }
}
