//! Kernel quantile regression: a box-constrained dual quadratic program
//! solved by pairwise (SMO-type) coordinate descent, plus a residual-quantile
//! intercept.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Points, QuantileLevel};
use crate::gp::Matern52;
use crate::metrics::{pinball, quantile_in_place};
use crate::prelude::*;

/// Stopping rule for the dual solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpOptions {
    /// Largest tolerated KKT violation, relative to `1 + (max y - min y)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol: 1e-10,
            max_iter: 2_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RkhsModel {
    alpha: Vec<f64>,
    b: f64,
    kernel: Matern52,
    lambda: f64,
    tau: QuantileLevel,
    x: Points,
    iterations: usize,
}

/// Minimises `0.5 a'Ka - a'y` over `lo <= a_i <= hi`, `sum a = 0`.
///
/// Each step moves one pair `(i, j)` along `e_i - e_j`, which keeps the
/// equality constraint exact. `i` is the most violating index that can
/// increase; `j` maximises the second-order decrease among those that can
/// decrease. Returns the coefficients and the number of pair updates.
pub fn solve_dual_qp(
    k: &DMatrix<f64>,
    y: &[f64],
    lo: f64,
    hi: f64,
    opts: QpOptions,
) -> Result<(Vec<f64>, usize)> {
    let n = y.len();
    if !(lo <= 0.0 && hi >= 0.0 && lo < hi) {
        return Err(Error::numerical("the dual box must contain zero"));
    }
    let mut a = vec![0.0; n];
    let mut g: Vec<f64> = y.iter().map(|v| -v).collect();
    let (ymin, ymax) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let scale = 1.0 + (ymax - ymin).max(0.0);
    let tol = opts.tol * scale;
    for it in 0..opts.max_iter {
        let mut i = usize::MAX;
        let mut gi = f64::INFINITY;
        let mut gmax = f64::NEG_INFINITY;
        for t in 0..n {
            if a[t] < hi && g[t] < gi {
                gi = g[t];
                i = t;
            }
            if a[t] > lo && g[t] > gmax {
                gmax = g[t];
            }
        }
        if i == usize::MAX || gmax - gi <= tol {
            return Ok((a, it));
        }
        let mut j = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for t in 0..n {
            if a[t] > lo && g[t] > gi {
                let diff = g[t] - gi;
                let curv = (k[(i, i)] + k[(t, t)] - 2.0 * k[(i, t)]).max(1e-300);
                let gain = diff * diff / curv;
                if gain > best {
                    best = gain;
                    j = t;
                }
            }
        }
        let curv = (k[(i, i)] + k[(j, j)] - 2.0 * k[(i, j)]).max(1e-300);
        let step = ((g[j] - g[i]) / curv).min(hi - a[i]).min(a[j] - lo);
        if !(step > 0.0) {
            return Ok((a, it));
        }
        a[i] = if step == hi - a[i] { hi } else { a[i] + step };
        a[j] = if step == a[j] - lo { lo } else { a[j] - step };
        for t in 0..n {
            g[t] += step * (k[(t, i)] - k[(t, j)]);
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        detail: "kernel quantile dual did not reach the KKT tolerance".into(),
    })
}

/// `ceil(n tau)`-th smallest residual `y_i - (K a)_i`.
fn residual_intercept(k: &DMatrix<f64>, y: &[f64], alpha: &[f64], tau: f64) -> f64 {
    let mut r: Vec<f64> = (0..y.len())
        .map(|i| y[i] - (0..y.len()).map(|j| k[(i, j)] * alpha[j]).sum::<f64>())
        .collect();
    quantile_in_place(&mut r, tau)
}

/// Unit-variance Matern-5/2 kernel with the given lengthscales.
pub fn rkhs_kernel(lengthscales: Vec<f64>) -> Result<Matern52> {
    Matern52::new(1.0, lengthscales)
}

/// Fits kernel quantile regression with penalty `lambda`.
pub fn rkhs_fit(
    data: &Dataset,
    tau: QuantileLevel,
    lambda: f64,
    kernel: &Matern52,
    opts: QpOptions,
) -> Result<RkhsModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    if kernel.dim() != data.dim() {
        return Err(Error::invalid("kernel dimension does not match the data"));
    }
    let n = data.len();
    let k = kernel.gram(data.x());
    let mut kq = k.clone();
    let jitter = 1e-10 * kernel.variance;
    for i in 0..n {
        kq[(i, i)] += jitter;
    }
    let c = 1.0 / (lambda * n as f64);
    let t = tau.get();
    let (alpha, iterations) = solve_dual_qp(&kq, data.y(), (t - 1.0) * c, t * c, opts)?;
    let b = residual_intercept(&k, data.y(), &alpha, t);
    Ok(RkhsModel {
        alpha,
        b,
        kernel: kernel.clone(),
        lambda,
        tau,
        x: data.x().clone(),
        iterations,
    })
}

impl RkhsModel {
    /// Model with given coefficients; the intercept follows the residual-quantile rule.
    pub fn with_coefficients(
        data: &Dataset,
        tau: QuantileLevel,
        lambda: f64,
        kernel: &Matern52,
        alpha: Vec<f64>,
    ) -> Result<Self> {
        if alpha.len() != data.len() {
            return Err(Error::invalid(
                "one coefficient per training point required",
            ));
        }
        let k = kernel.gram(data.x());
        let b = residual_intercept(&k, data.y(), &alpha, tau.get());
        Ok(RkhsModel {
            alpha,
            b,
            kernel: kernel.clone(),
            lambda,
            tau,
            x: data.x().clone(),
            iterations: 0,
        })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn intercept(&self) -> f64 {
        self.b
    }

    pub fn kernel(&self) -> &Matern52 {
        &self.kernel
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tau(&self) -> QuantileLevel {
        self.tau
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// `sum_i a_i k(x, x_i)`, the prediction without intercept.
    pub fn kernel_part(&self, x: &[f64]) -> f64 {
        self.x
            .rows()
            .zip(&self.alpha)
            .map(|(r, a)| a * self.kernel.eval(x, r))
            .sum()
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.kernel_part(x) + self.b
    }

    /// Regularised empirical risk `(1/n) sum l(y - q) + (lambda/2) a'Ka` on `data`.
    pub fn regularized_risk(&self, data: &Dataset) -> f64 {
        let kp: Vec<f64> = data.x().rows().map(|r| self.kernel_part(r)).collect();
        let fit: f64 = data
            .y()
            .iter()
            .zip(&kp)
            .map(|(y, g)| pinball(self.tau.get(), y - g - self.b))
            .sum();
        let norm: f64 = (0..self.x.len())
            .map(|i| self.alpha[i] * self.kernel_part(self.x.row(i)))
            .sum();
        fit / data.len() as f64 + 0.5 * self.lambda * norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::metrics::empirical_quantile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lvl(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn noisy_sine(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| (6.0 * v).sin() + rng.random::<f64>() * (0.2 + v))
            .collect();
        Dataset::new(Points::from_scalars(&x), y, Domain::unit(1)).unwrap()
    }

    #[test]
    fn zero_coefficients_give_the_unconditional_quantile() {
        let ds = noisy_sine(25, 1);
        let k = rkhs_kernel(vec![0.3]).unwrap();
        let m = RkhsModel::with_coefficients(&ds, lvl(0.8), 1.0, &k, vec![0.0; 25]).unwrap();
        let q = empirical_quantile(ds.y(), lvl(0.8)).unwrap();
        for x in [0.0, 0.33, 0.9] {
            assert_eq!(m.predict_one(&[x]), q);
        }
    }

    #[test]
    fn solution_is_feasible_and_beats_zero() {
        for (seed, tau) in [(2u64, 0.1), (3, 0.5), (4, 0.9)] {
            let ds = noisy_sine(40, seed);
            let lambda = 0.01;
            let m = rkhs_fit(
                &ds,
                lvl(tau),
                lambda,
                &rkhs_kernel(vec![0.2]).unwrap(),
                QpOptions::default(),
            )
            .unwrap();
            let c = 1.0 / (lambda * 40.0);
            let sum: f64 = m.alpha().iter().sum();
            assert!(sum.abs() <= 1e-8);
            for &a in m.alpha() {
                assert!(a >= (tau - 1.0) * c - 1e-8 && a <= tau * c + 1e-8);
            }
            let k = m.kernel().gram(ds.x());
            let a = nalgebra::DVector::from_column_slice(m.alpha());
            let dual =
                0.5 * a.dot(&(&k * &a)) - a.dot(&nalgebra::DVector::from_column_slice(ds.y()));
            assert!(dual <= 0.0);
        }
    }

    #[test]
    fn residual_sign_fraction_tracks_tau() {
        let ds = noisy_sine(60, 5);
        for tau in [0.1, 0.5, 0.9] {
            let m = rkhs_fit(
                &ds,
                lvl(tau),
                0.05,
                &rkhs_kernel(vec![0.25]).unwrap(),
                QpOptions::default(),
            )
            .unwrap();
            let below = (0..60)
                .filter(|&i| ds.y()[i] - m.predict_one(ds.x().row(i)) < 0.0)
                .count();
            assert!((below as f64 / 60.0 - tau).abs() <= 2.0 / 60.0);
        }
    }

    #[test]
    fn shifting_responses_shifts_only_the_intercept() {
        let ds = noisy_sine(30, 6);
        let k = rkhs_kernel(vec![0.3]).unwrap();
        let a = rkhs_fit(&ds, lvl(0.3), 0.02, &k, QpOptions::default()).unwrap();
        let b = rkhs_fit(&ds.shifted(3.5), lvl(0.3), 0.02, &k, QpOptions::default()).unwrap();
        for (x, y) in a.alpha().iter().zip(b.alpha()) {
            assert!((x - y).abs() < 1e-9, "{x} {y}");
        }
        assert!((b.intercept() - a.intercept() - 3.5).abs() < 1e-8);
    }

    #[test]
    fn interior_coefficients_sit_near_the_intercept() {
        let ds = noisy_sine(30, 8);
        let lambda = 0.02;
        let m = rkhs_fit(
            &ds,
            lvl(0.5),
            lambda,
            &rkhs_kernel(vec![0.3]).unwrap(),
            QpOptions::default(),
        )
        .unwrap();
        let c = 1.0 / (lambda * 30.0);
        let mut resid: Vec<f64> = (0..30)
            .map(|i| ds.y()[i] - m.kernel_part(ds.x().row(i)))
            .collect();
        resid.sort_by(f64::total_cmp);
        let pos = resid.iter().position(|&r| r == m.intercept()).unwrap();
        for i in 0..30 {
            let a = m.alpha()[i];
            if a > -0.5 * c + 1e-9 && a < 0.5 * c - 1e-9 {
                let r = ds.y()[i] - m.kernel_part(ds.x().row(i));
                let lo = resid[pos.saturating_sub(1)];
                let hi = resid[(pos + 1).min(29)];
                assert!(r >= lo - 1e-7 && r <= hi + 1e-7);
            }
        }
    }

    /// Primal descent on the regularised risk in `(u, b)`, where `Ka = Lu` and
    /// `a'Ka = |u|^2`: quasi-Newton on a Huber-smoothed pinball with the
    /// smoothing width annealed towards zero, then subgradient polishing on the
    /// exact risk. Returns the best exact risk seen.
    fn primal_descent_risk(ds: &Dataset, tau: f64, lambda: f64, kernel: &Matern52) -> f64 {
        use crate::metrics::smoothed_pinball_with_grad;
        use crate::optim::{bfgs_minimize, BfgsOptions};
        let n = ds.len();
        let mut k = kernel.gram(ds.x());
        for i in 0..n {
            k[(i, i)] += 1e-10;
        }
        let l = k.cholesky().unwrap().l();
        let exact = |p: &[f64]| {
            let u = nalgebra::DVector::from_column_slice(&p[..n]);
            let fit = &l * &u;
            (0..n)
                .map(|i| pinball(tau, ds.y()[i] - fit[i] - p[n]))
                .sum::<f64>()
                / n as f64
                + 0.5 * lambda * u.norm_squared()
        };
        let mut p = vec![0.0; n + 1];
        let mut best = exact(&p);
        for e in 0..=20 {
            let eta = 0.5f64.powi(e);
            let obj = |p: &[f64], g: &mut [f64]| {
                let u = nalgebra::DVector::from_column_slice(&p[..n]);
                let fit = &l * &u;
                let mut val = 0.5 * lambda * u.norm_squared();
                let mut dr = nalgebra::DVector::zeros(n);
                for i in 0..n {
                    let (v, d) = smoothed_pinball_with_grad(tau, eta, ds.y()[i] - fit[i] - p[n]);
                    val += v / n as f64;
                    dr[i] = -d / n as f64;
                }
                let gu = l.transpose() * &dr + lambda * &u;
                g[..n].copy_from_slice(gu.as_slice());
                g[n] = dr.sum();
                val
            };
            let opts = BfgsOptions {
                max_iter: 400,
                grad_tol: 1e-12,
                ..Default::default()
            };
            p = bfgs_minimize(obj, &p, &opts).x;
            best = best.min(exact(&p));
        }
        for t in 1..=20_000 {
            let u = nalgebra::DVector::from_column_slice(&p[..n]);
            let fit = &l * &u;
            let psi = nalgebra::DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    if ds.y()[i] - fit[i] - p[n] < 0.0 {
                        tau - 1.0
                    } else {
                        tau
                    }
                }),
            );
            let gu = -(l.transpose() * &psi) / n as f64 + lambda * &u;
            let gb = -psi.sum() / n as f64;
            let step = 1e-4 / t as f64;
            for i in 0..n {
                p[i] -= step * gu[i];
            }
            p[n] -= step * gb;
            best = best.min(exact(&p));
        }
        best
    }

    #[test]
    fn dual_solution_matches_primal_descent_oracle() {
        for (seed, tau) in [(11u64, 0.2), (12, 0.5), (13, 0.85)] {
            let ds = noisy_sine(30, seed);
            let kernel = rkhs_kernel(vec![0.25]).unwrap();
            let lambda = 0.05;
            let m = rkhs_fit(&ds, lvl(tau), lambda, &kernel, QpOptions::default()).unwrap();
            let qp = m.regularized_risk(&ds);
            let oracle = primal_descent_risk(&ds, tau, lambda, &kernel);
            assert!(qp <= oracle * (1.0 + 1e-3), "qp {qp} oracle {oracle}");
            assert!(
                (qp - oracle).abs() <= 1e-3 * oracle,
                "qp {qp} oracle {oracle}"
            );
        }
    }
}
