//! Quasi-Newton minimisation used by every gradient-based fit.

use crate::prelude::*;

/// Settings for [`bfgs_minimize`].
#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once the (projected) gradient infinity-norm drops below this.
    pub grad_tol: f64,
    /// Stop once a step improves the objective by less than this relative amount.
    pub f_rel_tol: f64,
    /// Optional box, enforced by projection.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-6,
            f_rel_tol: 0.0,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn project(x: &mut [f64], bounds: &Option<(Vec<f64>, Vec<f64>)>) {
    if let Some((lo, hi)) = bounds {
        for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
            *v = v.clamp(l, h);
        }
    }
}

/// Gradient with the components that push against an active bound removed.
fn projected_gradient(x: &[f64], g: &[f64], bounds: &Option<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mut pg = g.to_vec();
    if let Some((lo, hi)) = bounds {
        for i in 0..x.len() {
            if (x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0) {
                pg[i] = 0.0;
            }
        }
    }
    pg
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `f` with BFGS and a backtracking Armijo line search.
///
/// `f(x, grad)` returns the objective and writes the gradient. Non-finite
/// values are treated as "step too long". With bounds, iterates are projected
/// onto the box and variables held at an active bound leave the quasi-Newton
/// direction.
pub fn bfgs_minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, &opts.bounds);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsResult {
            x,
            f: f64::INFINITY,
            grad_norm: f64::INFINITY,
            iterations: 0,
            converged: false,
        };
    }
    let mut h = identity(n);
    let mut fresh_h = true;
    let mut g_new = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut iter = 0;
    loop {
        let pg = projected_gradient(&x, &g, &opts.bounds);
        let gnorm = inf_norm(&pg);
        if gnorm <= opts.grad_tol {
            return BfgsResult {
                x,
                f: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            };
        }
        if iter >= opts.max_iter {
            return BfgsResult {
                x,
                f: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: false,
            };
        }
        iter += 1;

        let free: Vec<bool> = (0..n).map(|i| pg[i] != 0.0 || g[i] == 0.0).collect();
        let mut dir = vec![0.0; n];
        for i in 0..n {
            if free[i] {
                dir[i] = -(0..n)
                    .filter(|&j| free[j])
                    .map(|j| h[i * n + j] * g[j])
                    .sum::<f64>();
            }
        }
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            dir = pg.iter().map(|v| -v).collect();
            slope = -dot(&pg, &pg);
            h = identity(n);
            fresh_h = true;
        }
        // Keep the first step of a fresh approximation to unit length.
        let mut step = if fresh_h {
            (1.0 / inf_norm(&dir)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            project(&mut x_new, &opts.bounds);
            let f_new = f(&x_new, &mut g_new);
            let actual: f64 = dot(
                &g,
                &x_new.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>(),
            );
            let expected = if opts.bounds.is_some() {
                actual.min(0.0)
            } else {
                step * slope
            };
            if f_new.is_finite()
                && g_new.iter().all(|v| v.is_finite())
                && f_new <= fx + 1e-4 * expected
            {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            if fresh_h {
                return BfgsResult {
                    x,
                    f: fx,
                    grad_norm: gnorm,
                    iterations: iter,
                    converged: false,
                };
            }
            h = identity(n);
            fresh_h = true;
            continue;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let f_old = fx;
        core::mem::swap(&mut x, &mut x_new);
        core::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh_h {
                // Shanno-Phua scaling of the initial approximation.
                let scale = sy / dot(&y, &y);
                for v in h.iter_mut() {
                    *v *= scale;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh_h = false;
        }
        if opts.f_rel_tol > 0.0 && (f_old - fx) <= opts.f_rel_tol * (1.0 + fx.abs()) {
            let gnorm = inf_norm(&projected_gradient(&x, &g, &opts.bounds));
            return BfgsResult {
                x,
                f: fx,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
            };
        }
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// Inverse-Hessian update `H <- (I - r s y^T) H (I - r y s^T) + r s s^T`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let r = 1.0 / sy;
    let hy: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum())
        .collect();
    let yhy = dot(y, &hy);
    let c = (1.0 + r * yhy) * r;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += c * s[i] * s[j] - r * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn solves_rosenbrock() {
        let opts = BfgsOptions {
            max_iter: 1000,
            grad_tol: 1e-9,
            ..Default::default()
        };
        let r = bfgs_minimize(rosenbrock, &[-1.2, 1.0], &opts);
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn respects_bounds() {
        let opts = BfgsOptions {
            bounds: Some((vec![2.0, -5.0], vec![5.0, 5.0])),
            ..Default::default()
        };
        let r = bfgs_minimize(
            |x, g| {
                g[0] = 2.0 * x[0];
                g[1] = 2.0 * (x[1] - 1.0);
                x[0] * x[0] + (x[1] - 1.0).powi(2)
            },
            &[4.0, 4.0],
            &opts,
        );
        assert!(r.converged);
        assert!((r.x[0] - 2.0).abs() < 1e-12 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn backs_off_non_finite_regions() {
        let r = bfgs_minimize(
            |x, g| {
                if x[0] <= 0.0 {
                    return f64::NAN;
                }
                g[0] = 1.0 - 1.0 / x[0];
                x[0] - x[0].ln()
            },
            &[5.0],
            &BfgsOptions::default(),
        );
        assert!(r.converged && (r.x[0] - 1.0).abs() < 1e-6);
    }
}
