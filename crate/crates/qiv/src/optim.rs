//! Unconstrained optimizers: BFGS with backtracking line search and a
//! Nelder-Mead simplex fallback.
//!
//! Both minimize. Objectives may return `f64::INFINITY` to mark points
//! outside the feasible region (e.g. link values whose implied risk
//! triple does not exist); the line search simply backtracks away from
//! them. The BFGS update follows Nocedal & Wright (2006), Algorithm 6.1,
//! with the standard initial-scaling heuristic and a curvature guard.

use crate::linalg::{dot, inf_norm, Mat};

/// Outcome of an optimizer run.
#[derive(Debug, Clone)]
pub struct OptimResult {
    /// Best point found.
    pub x: Vec<f64>,
    /// Objective value at `x`.
    pub f: f64,
    /// Infinity norm of the gradient at `x` (NaN for derivative-free runs).
    pub grad_norm: f64,
    /// Iterations used.
    pub iterations: usize,
    /// Whether the gradient tolerance was met.
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 48;

/// BFGS minimization of `value` with analytic `gradient`.
///
/// `gradient` is only evaluated at points where `value` is finite.
pub fn bfgs<V, G>(
    x0: &[f64],
    value: V,
    gradient: G,
    gtol: f64,
    max_iter: usize,
) -> OptimResult
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let k = x0.len();
    let mut x = x0.to_vec();
    let mut f = value(&x);
    assert!(f.is_finite(), "BFGS requires a feasible starting point");
    let mut g = gradient(&x);
    let mut h = Mat::zeros(k, k); // inverse Hessian approximation
    for i in 0..k {
        h.set(i, i, 1.0);
    }
    let mut first_update = true;
    let mut stalls = 0usize;

    for iter in 0..max_iter {
        if inf_norm(&g) < gtol {
            return OptimResult {
                x,
                f,
                grad_norm: inf_norm(&g),
                iterations: iter,
                converged: true,
            };
        }

        // d = -H g
        let mut d: Vec<f64> = (0..k).map(|i| -dot(h.row(i), &g)).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            // reset to steepest descent if H lost positive definiteness
            for i in 0..k {
                for j in 0..k {
                    h.set(i, j, if i == j { 1.0 } else { 0.0 });
                }
            }
            first_update = true;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        // backtracking Armijo search
        let mut t = 1.0;
        let mut accepted = false;
        let mut x_new = x.clone();
        let mut f_new = f;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..k {
                x_new[i] = x[i] + t * d[i];
            }
            let cand = value(&x_new);
            if cand.is_finite() && cand <= f + ARMIJO_C1 * t * slope {
                f_new = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break; // no progress possible along this direction
        }

        let g_new = gradient(&x_new);
        let s: Vec<f64> = (0..k).map(|i| x_new[i] - x[i]).collect();
        let yv: Vec<f64> = (0..k).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &yv);

        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            if first_update {
                let yy = dot(&yv, &yv);
                if yy > 0.0 {
                    let scale = sy / yy;
                    for i in 0..k {
                        for j in 0..k {
                            h.set(i, j, if i == j { scale } else { 0.0 });
                        }
                    }
                }
                first_update = false;
            }
            bfgs_update(&mut h, &s, &yv, 1.0 / sy);
        }

        let f_change = (f - f_new).abs();
        if f_change <= 1e-14 * (1.0 + f.abs()) {
            stalls += 1;
        } else {
            stalls = 0;
        }
        x = x_new;
        f = f_new;
        g = g_new;
        if stalls >= 3 {
            break;
        }
    }

    let gn = inf_norm(&g);
    OptimResult {
        converged: gn < gtol,
        grad_norm: gn,
        iterations: max_iter,
        x,
        f,
    }
}

/// Inverse-Hessian BFGS update: `H <- (I - r s y') H (I - r y s') + r s s'`.
fn bfgs_update(h: &mut Mat, s: &[f64], y: &[f64], rho: f64) {
    let k = s.len();
    let hy: Vec<f64> = (0..k).map(|i| dot(h.row(i), y)).collect();
    let yhy = dot(y, &hy);
    // H - r (s (Hy)' + (Hy) s') + r^2 yHy s s' + r s s'
    for i in 0..k {
        for j in 0..k {
            let v = h.get(i, j) - rho * (s[i] * hy[j] + hy[i] * s[j])
                + (rho * rho * yhy + rho) * s[i] * s[j];
            h.set(i, j, v);
        }
    }
}

/// Nelder-Mead simplex minimization (derivative-free fallback).
pub fn nelder_mead<V>(x0: &[f64], value: V, max_evals: usize) -> OptimResult
where
    V: Fn(&[f64]) -> f64,
{
    let k = x0.len();
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut evals = 0usize;
    let eval = |p: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = value(p);
        if v.is_finite() {
            v
        } else {
            f64::MAX
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    simplex.push(x0.to_vec());
    for j in 0..k {
        let mut p = x0.to_vec();
        p[j] += if p[j].abs() > 1e-8 { 0.1 * p[j].abs() } else { 0.1 };
        simplex.push(p);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=k).collect();
        idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap());
        let best = idx[0];
        let worst = idx[k];
        let second_worst = idx[k - 1];

        if (fv[worst] - fv[best]).abs() <= 1e-13 * (1.0 + fv[best].abs()) {
            break;
        }

        let mut centroid = vec![0.0; k];
        for &i in idx.iter().take(k) {
            for j in 0..k {
                centroid[j] += simplex[i][j] / k as f64;
            }
        }

        let reflect: Vec<f64> = (0..k)
            .map(|j| centroid[j] + alpha * (centroid[j] - simplex[worst][j]))
            .collect();
        let fr = eval(&reflect, &mut evals);

        if fr < fv[best] {
            let expand: Vec<f64> = (0..k)
                .map(|j| centroid[j] + gamma * (reflect[j] - centroid[j]))
                .collect();
            let fe = eval(&expand, &mut evals);
            if fe < fr {
                simplex[worst] = expand;
                fv[worst] = fe;
            } else {
                simplex[worst] = reflect;
                fv[worst] = fr;
            }
        } else if fr < fv[second_worst] {
            simplex[worst] = reflect;
            fv[worst] = fr;
        } else {
            let contract: Vec<f64> = (0..k)
                .map(|j| centroid[j] + rho * (simplex[worst][j] - centroid[j]))
                .collect();
            let fc = eval(&contract, &mut evals);
            if fc < fv[worst] {
                simplex[worst] = contract;
                fv[worst] = fc;
            } else {
                let best_point = simplex[best].clone();
                for i in 0..=k {
                    if i == best {
                        continue;
                    }
                    for j in 0..k {
                        simplex[i][j] = best_point[j] + sigma * (simplex[i][j] - best_point[j]);
                    }
                    fv[i] = eval(&simplex[i].clone(), &mut evals);
                }
            }
        }
    }

    let mut best = 0usize;
    for i in 1..=k {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    OptimResult {
        x: simplex[best].clone(),
        f: fv[best],
        grad_norm: f64::NAN,
        iterations: evals,
        converged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_grad(x: &[f64]) -> Vec<f64> {
        vec![
            -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
            200.0 * (x[1] - x[0] * x[0]),
        ]
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let r = bfgs(&[-1.2, 1.0], rosenbrock, rosenbrock_grad, 1e-10, 500);
        assert!(r.converged, "grad norm {}", r.grad_norm);
        assert!((r.x[0] - 1.0).abs() < 1e-7);
        assert!((r.x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bfgs_quadratic_few_iterations() {
        let value = |x: &[f64]| 0.5 * (3.0 * x[0] * x[0] + x[1] * x[1]) + x[0] - 2.0 * x[1];
        let grad = |x: &[f64]| vec![3.0 * x[0] + 1.0, x[1] - 2.0];
        let r = bfgs(&[5.0, -7.0], value, grad, 1e-12, 100);
        assert!(r.converged);
        assert!((r.x[0] + 1.0 / 3.0).abs() < 1e-9);
        assert!((r.x[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bfgs_backtracks_past_infeasible_region() {
        // objective undefined for x > 2; minimum at x = 1
        let value = |x: &[f64]| {
            if x[0] > 2.0 {
                f64::INFINITY
            } else {
                (x[0] - 1.0).powi(2)
            }
        };
        let grad = |x: &[f64]| vec![2.0 * (x[0] - 1.0)];
        let r = bfgs(&[-30.0], value, grad, 1e-10, 200);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn nelder_mead_reaches_rosenbrock_valley() {
        let r = nelder_mead(&[-1.2, 1.0], rosenbrock, 4000);
        assert!(rosenbrock(&r.x) < 1e-8, "f = {}", r.f);
    }
}
