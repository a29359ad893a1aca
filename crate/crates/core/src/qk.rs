//! Quantile kriging: pointwise order-statistic quantiles on a replicated
//! design, bootstrap noise variances and a heteroscedastic GP smoother.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QuantileLevel, ReplicatedDataset};
use crate::gp::{log_marginal_likelihood, GpPredictor, Matern52};
use crate::metrics::quantile_in_place;
use crate::optim::BfgsOptions;
use crate::prelude::*;
use crate::tuning::multistart_ml;

/// Per-base order-statistic quantile of the replicates.
pub fn local_quantiles(data: &ReplicatedDataset, tau: QuantileLevel) -> Vec<f64> {
    data.replicates()
        .iter()
        .map(|r| quantile_in_place(&mut r.clone(), tau.get()))
        .collect()
}

/// Variance of the order-statistic quantile over `b_boot` resamples with replacement.
pub fn bootstrap_variance<R: Rng + ?Sized>(
    replicates: &[f64],
    tau: QuantileLevel,
    b_boot: usize,
    rng: &mut R,
) -> Result<f64> {
    let r = replicates.len();
    if r < 2 {
        return Err(Error::invalid(
            "bootstrap variance needs at least two replicates",
        ));
    }
    if b_boot < 2 {
        return Err(Error::invalid(
            "bootstrap variance needs at least two resamples",
        ));
    }
    let mut buf = vec![0.0; r];
    let qs: Vec<f64> = (0..b_boot)
        .map(|_| {
            for v in buf.iter_mut() {
                *v = replicates[rng.random_range(0..r)];
            }
            quantile_in_place(&mut buf, tau.get())
        })
        .collect();
    let mean = qs.iter().sum::<f64>() / b_boot as f64;
    Ok(qs.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (b_boot - 1) as f64)
}

/// How the GP noise variances are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    Bootstrap,
    /// Interpolate the pointwise quantiles.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QkOptions {
    pub b_boot: usize,
    /// Likelihood starts; `None` means 20 per hyperparameter.
    pub n_start: Option<usize>,
    pub noise: NoiseMode,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for QkOptions {
    fn default() -> Self {
        QkOptions {
            b_boot: 200,
            n_start: None,
            noise: NoiseMode::Bootstrap,
            max_iter: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QkModel {
    pub gp: GpPredictor,
    pub tau: QuantileLevel,
    /// Log marginal likelihood at the chosen hyperparameters.
    pub loglik: f64,
    /// Log-likelihood at each multistart initialisation.
    pub start_logliks: Vec<f64>,
    /// Terminal `(log-likelihood, kernel)` of every start, for oracle selection.
    pub candidates: Vec<(f64, Matern52)>,
}

impl QkModel {
    pub fn quantiles(&self) -> &[f64] {
        self.gp.observations()
    }

    pub fn noise(&self) -> &[f64] {
        self.gp.noise()
    }

    /// Posterior mean and variance.
    pub fn predict_one(&self, x: &[f64]) -> (f64, f64) {
        self.gp.predict_one(x)
    }

    /// Same model with another candidate kernel.
    pub fn with_kernel(&self, kernel: Matern52) -> Result<QkModel> {
        let gp = GpPredictor::new(
            kernel,
            self.gp.inputs().clone(),
            self.quantiles().to_vec(),
            self.noise().to_vec(),
        )?;
        Ok(QkModel { gp, ..self.clone() })
    }
}

/// Log-space box for `(variance, lengthscales)` given the observations and input widths.
pub(crate) fn kernel_log_box(obs: &[f64], widths: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let v = if var > 0.0 { var } else { 1.0 };
    let mut lo = vec![(1e-3 * v).ln()];
    let mut hi = vec![(1e3 * v).ln()];
    for &w in widths {
        lo.push((1e-2 * w).ln());
        hi.push((10.0 * w).ln());
    }
    (lo, hi)
}

/// Fits quantile kriging by maximum likelihood over the kernel hyperparameters.
pub fn qk_fit(data: &ReplicatedDataset, tau: QuantileLevel, opts: &QkOptions) -> Result<QkModel> {
    if data.n_bases() < 2 {
        return Err(Error::invalid(
            "quantile kriging needs at least two distinct points",
        ));
    }
    let q = local_quantiles(data, tau);
    let noise = match opts.noise {
        NoiseMode::Zero => vec![0.0; q.len()],
        NoiseMode::Bootstrap => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            data.replicates()
                .iter()
                .map(|r| bootstrap_variance(r, tau, opts.b_boot, &mut rng))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let x = data.bases().clone();
    let d = x.dim();
    let widths: Vec<f64> = (0..d).map(|j| data.domain().width(j)).collect();
    let (lo, hi) = kernel_log_box(&q, &widths);
    let n_start = opts.n_start.unwrap_or(20 * (d + 1));
    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: 1e-6,
        f_rel_tol: 1e-12,
        bounds: None,
    };
    let lml = |p: &[f64]| log_marginal_likelihood(&Matern52::from_log_params(p)?, &x, &q, &noise);
    let res = multistart_ml(
        lml,
        &lo,
        &hi,
        n_start,
        crate::derive_seed(opts.seed, 1),
        &bopts,
    )?;
    let n_log = res.log.len() / 2;
    let start_logliks = res.log[..n_log].iter().map(|e| -e.score).collect();
    let candidates = res.log[n_log..]
        .iter()
        .filter(|e| e.score.is_finite())
        .map(|e| Ok((-e.score, Matern52::from_log_params(&e.point)?)))
        .collect::<Result<Vec<_>>>()?;
    let kernel = Matern52::from_log_params(&res.best_point)?;
    let gp = GpPredictor::new(kernel, x, q, noise)?;
    Ok(QkModel {
        gp,
        tau,
        loglik: -res.best_score,
        start_logliks,
        candidates,
    })
}
