//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::dot;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖g‖ ≤ grad_tol·(1 + |f|)`.
    pub grad_tol: f64,
    /// Diagonal of the initial inverse Hessian before any curvature pair.
    pub initial_scale: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

/// Minimizes `f` given `eval(x) -> (f(x), ∇f(x))`.
pub(crate) fn minimize<F>(mut eval: F, x0: Vec<f64>, opts: LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0;
    let (mut f, mut g) = eval(&x)?;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut gamma = opts.initial_scale;
    let mut dir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut alpha = vec![0.0; opts.memory];
    let mut restarted = false;

    for it in 0..opts.max_iter {
        let gn = dot(&g, &g).sqrt();
        let tol = opts.grad_tol * (1.0 + f.abs());
        if gn <= tol {
            return Ok(LbfgsResult { x, f, iterations: it });
        }

        // Two-loop recursion for dir = −H g.
        dir.copy_from_slice(&g);
        for (j, (s, y, rho)) in pairs.iter().enumerate().rev() {
            alpha[j] = rho * dot(s, &dir);
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= alpha[j] * yi);
        }
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (j, (s, y, rho)) in pairs.iter().enumerate() {
            let beta = rho * dot(y, &dir);
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (alpha[j] - beta) * si);
        }
        dir.iter_mut().for_each(|d| *d = -*d);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            pairs.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -opts.initial_scale * gi);
            slope = dot(&g, &dir);
        }

        let mut t = 1.0;
        let mut step = None;
        for _ in 0..60 {
            trial.iter_mut().zip(&x).zip(&dir).for_each(|((o, xi), di)| *o = xi + t * di);
            let (ft, gt) = eval(&trial)?;
            if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                step = Some((ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((ft, gt)) = step else {
            if gn <= 100.0 * tol {
                return Ok(LbfgsResult { x, f, iterations: it });
            }
            if !restarted {
                restarted = true;
                pairs.clear();
                gamma = opts.initial_scale;
                continue;
            }
            return Err(Error::NumericalFailure {
                message: format!("line search failed with |grad| = {gn:e}"),
                iterations: it,
                last_iterate: x,
            });
        };
        restarted = false;
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * yy.sqrt() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
            gamma = sy / yy;
        }
        x.copy_from_slice(&trial);
        f = ft;
        g = gt;
    }
    let gn = dot(&g, &g).sqrt();
    if gn <= 100.0 * opts.grad_tol * (1.0 + f.abs()) {
        return Ok(LbfgsResult { x, f, iterations: opts.max_iter });
    }
    Err(Error::NumericalFailure {
        message: format!("no convergence, |grad| = {gn:e}"),
        iterations: opts.max_iter,
        last_iterate: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> LbfgsOptions {
        LbfgsOptions { memory: 10, max_iter: 2000, grad_tol: 1e-10, initial_scale: 1.0 }
    }

    #[test]
    fn rosenbrock() {
        let r = minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                Ok((f, g))
            },
            vec![-1.2, 1.0],
            opts(),
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let d = [1.0, 10.0, 100.0, 1000.0];
        let r = minimize(
            |x| {
                let f = x.iter().zip(&d).map(|(v, di)| 0.5 * di * v * v).sum();
                Ok((f, x.iter().zip(&d).map(|(v, di)| di * v).collect()))
            },
            vec![1.0; 4],
            opts(),
        )
        .unwrap();
        assert!(r.x.iter().all(|v| v.abs() < 1e-9));
    }
}
