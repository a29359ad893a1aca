//! Gaussian-process machinery shared by the kernel methods: the Matern-5/2
//! kernel, heteroscedastic-noise posteriors and the log marginal likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Points;
use crate::linalg::{cholesky_jittered, Factor};
use crate::prelude::*;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Matern-5/2 kernel with one lengthscale per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matern52 {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl Matern52 {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(Error::invalid("kernel lengthscales must be positive"));
        }
        Ok(Matern52 {
            variance,
            lengthscales,
        })
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `(log variance, log lengthscales...)`.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p = vec![self.variance.ln()];
        p.extend(self.lengthscales.iter().map(|t| t.ln()));
        p
    }

    pub fn from_log_params(p: &[f64]) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::invalid(
                "need a variance and at least one lengthscale",
            ));
        }
        Matern52::new(p[0].exp(), p[1..].iter().map(|v| v.exp()).collect())
    }

    #[inline]
    fn scaled_dist(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), t)| {
                let u = (a - b) / t;
                u * u
            })
            .sum::<f64>()
            .sqrt()
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = self.scaled_dist(x, y);
        self.variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
    }

    pub fn gram(&self, x: &Points) -> DMatrix<f64> {
        let n = x.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.variance;
            for j in 0..i {
                let v = self.eval(x.row(i), x.row(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// `K(a, b)` with rows indexed by `a`.
    pub fn cross(&self, a: &Points, b: &Points) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.eval(a.row(i), b.row(j)))
    }

    /// Derivatives of the Gram matrix with respect to the log parameters.
    pub fn gram_log_gradients(&self, x: &Points) -> Vec<DMatrix<f64>> {
        let n = x.len();
        let d = self.dim();
        let mut out = vec![self.gram(x)];
        for j in 0..d {
            let t2 = self.lengthscales[j] * self.lengthscales[j];
            out.push(DMatrix::from_fn(n, n, |a, b| {
                let r = self.scaled_dist(x.row(a), x.row(b));
                let delta = x.row(a)[j] - x.row(b)[j];
                5.0 / 3.0 * self.variance * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp() * delta * delta
                    / t2
            }));
        }
        out
    }
}

/// `k(x, x')` for the Matern-5/2 kernel.
pub fn kernel_eval(k: &Matern52, x: &[f64], y: &[f64]) -> f64 {
    k.eval(x, y)
}

/// Serialisable inputs of a [`GpPredictor`]; the factorisation is rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpParts {
    pub kernel: Matern52,
    pub x: Points,
    pub obs: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Zero-mean GP conditioned on `obs` observed with independent noise variances `noise`.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "GpParts", into = "GpParts")]
pub struct GpPredictor {
    parts: GpParts,
    factor: Factor,
    weights: DVector<f64>,
}

impl core::fmt::Debug for GpPredictor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GpPredictor")
            .field("parts", &self.parts)
            .finish_non_exhaustive()
    }
}

impl TryFrom<GpParts> for GpPredictor {
    type Error = Error;
    fn try_from(p: GpParts) -> Result<Self> {
        GpPredictor::new(p.kernel, p.x, p.obs, p.noise)
    }
}

impl From<GpPredictor> for GpParts {
    fn from(g: GpPredictor) -> GpParts {
        g.parts
    }
}

fn noisy_gram(kernel: &Matern52, x: &Points, noise: &[f64]) -> Result<DMatrix<f64>> {
    if noise.len() != x.len() || noise.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid(
            "noise variances must be finite, nonnegative and one per point",
        ));
    }
    if x.dim() != kernel.dim() {
        return Err(Error::invalid("kernel dimension does not match the inputs"));
    }
    let mut a = kernel.gram(x);
    for (i, v) in noise.iter().enumerate() {
        a[(i, i)] += v;
    }
    Ok(a)
}

impl GpPredictor {
    pub fn new(kernel: Matern52, x: Points, obs: Vec<f64>, noise: Vec<f64>) -> Result<Self> {
        if obs.len() != x.len() {
            return Err(Error::invalid("one observation per input point required"));
        }
        let factor = cholesky_jittered(&noisy_gram(&kernel, &x, &noise)?)?;
        let weights = factor.solve(&DVector::from_column_slice(&obs));
        Ok(GpPredictor {
            parts: GpParts {
                kernel,
                x,
                obs,
                noise,
            },
            factor,
            weights,
        })
    }

    pub fn kernel(&self) -> &Matern52 {
        &self.parts.kernel
    }

    pub fn inputs(&self) -> &Points {
        &self.parts.x
    }

    pub fn observations(&self) -> &[f64] {
        &self.parts.obs
    }

    pub fn noise(&self) -> &[f64] {
        &self.parts.noise
    }

    /// Diagonal jitter the factorisation needed.
    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    /// `(K + B)^{-1} obs`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Posterior mean and variance at one point.
    pub fn predict_one(&self, x: &[f64]) -> (f64, f64) {
        let k = &self.parts.kernel;
        let kx = DVector::from_iterator(
            self.parts.x.len(),
            self.parts.x.rows().map(|r| k.eval(x, r)),
        );
        let mean = kx.dot(&self.weights);
        let v = self.factor.solve_lower(&kx);
        (mean, (k.variance - v.norm_squared()).max(0.0))
    }

    pub fn posterior(&self, xs: &Points) -> GpPosterior {
        let k = &self.parts.kernel;
        let cross = k.cross(&self.parts.x, xs);
        let mean = (cross.transpose() * &self.weights)
            .iter()
            .cloned()
            .collect();
        let v = self
            .factor
            .chol
            .l_dirty()
            .solve_lower_triangular(&cross)
            .unwrap_or(cross);
        let variance = (0..xs.len())
            .map(|j| (k.variance - v.column(j).norm_squared()).max(0.0))
            .collect();
        GpPosterior {
            mean,
            variance,
            v,
            kernel: k.clone(),
            xs: xs.clone(),
        }
    }
}

/// Posterior at a set of query points.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    pub mean: Vec<f64>,
    /// Marginal variances, clamped at zero.
    pub variance: Vec<f64>,
    v: DMatrix<f64>,
    kernel: Matern52,
    xs: Points,
}

impl GpPosterior {
    /// Posterior covariance between query points `i` and `j`.
    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        self.kernel.eval(self.xs.row(i), self.xs.row(j)) - self.v.column(i).dot(&self.v.column(j))
    }
}

pub fn gp_posterior(
    kernel: &Matern52,
    x: &Points,
    obs: &[f64],
    noise: &[f64],
    xs: &Points,
) -> Result<GpPosterior> {
    Ok(GpPredictor::new(kernel.clone(), x.clone(), obs.to_vec(), noise.to_vec())?.posterior(xs))
}

/// Log marginal likelihood and its gradient in `(log variance, log lengthscales)`.
pub fn log_marginal_likelihood(
    kernel: &Matern52,
    x: &Points,
    obs: &[f64],
    noise: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if obs.len() != x.len() {
        return Err(Error::invalid("one observation per input point required"));
    }
    let factor = cholesky_jittered(&noisy_gram(kernel, x, noise)?)?;
    let y = DVector::from_column_slice(obs);
    let alpha = factor.solve(&y);
    let n = obs.len() as f64;
    let value = -0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n * LN_2PI;
    let w = &alpha * alpha.transpose() - factor.inverse();
    let grad = kernel
        .gram_log_gradients(x)
        .iter()
        .map(|dk| 0.5 * w.component_mul(dk).sum())
        .collect();
    Ok((value, grad))
}
