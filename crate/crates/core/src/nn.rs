//! One-hidden-layer quantile neural network trained on an annealed
//! smoothed pinball loss with weight decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QuantileLevel};
use crate::metrics::{pinball, quantile_in_place, smoothed_pinball_with_grad};
use crate::optim::{bfgs_minimize, BfgsOptions};
use crate::prelude::*;

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Sigmoid hidden layer, identity output, with input/output standardisation.
///
/// Parameters are stored flat as `[W (J x d, row-major), b (J), v (J), c]`
/// and act on standardised inputs and responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpQuantileNet {
    d: usize,
    hidden: usize,
    params: Vec<f64>,
    x_shift: Vec<f64>,
    x_scale: Vec<f64>,
    y_shift: f64,
    y_scale: f64,
}

impl MlpQuantileNet {
    /// Network with identity standardisation and the given flat parameters.
    pub fn from_params(d: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::invalid(
                "network needs at least one input and one hidden unit",
            ));
        }
        if params.len() != n_params(d, hidden) || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid(
                "parameter vector has the wrong length or non-finite entries",
            ));
        }
        Ok(MlpQuantileNet {
            d,
            hidden,
            params,
            x_shift: vec![0.0; d],
            x_scale: vec![1.0; d],
            y_shift: 0.0,
            y_scale: 1.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Hidden-to-output weights (standardised scale).
    pub fn output_weights(&self) -> &[f64] {
        let j = self.hidden;
        &self.params[j * self.d + j..j * self.d + 2 * j]
    }

    pub fn output_bias(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Prediction in the original response units.
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        let z: Vec<f64> = x
            .iter()
            .zip(&self.x_shift)
            .zip(&self.x_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        self.y_shift + self.y_scale * raw_forward(&self.params, self.d, self.hidden, &z)
    }
}

pub fn n_params(d: usize, hidden: usize) -> usize {
    hidden * d + 2 * hidden + 1
}

fn raw_forward(p: &[f64], d: usize, j: usize, x: &[f64]) -> f64 {
    let (w, rest) = p.split_at(j * d);
    let (b, rest) = rest.split_at(j);
    let (v, c) = rest.split_at(j);
    let mut out = c[0];
    for h in 0..j {
        let a: f64 = w[h * d..(h + 1) * d]
            .iter()
            .zip(x)
            .map(|(wi, xi)| wi * xi)
            .sum::<f64>()
            + b[h];
        out += v[h] * sigmoid(a);
    }
    out
}

/// `c + sum_j v_j sigmoid(<w_j, x> + b_j)` on the network's own (standardised) scale.
pub fn nn_forward(net: &MlpQuantileNet, x: &[f64]) -> f64 {
    raw_forward(&net.params, net.d, net.hidden, x)
}

/// Gradient of [`nn_forward`] with respect to the flat parameters.
pub fn nn_forward_gradient(net: &MlpQuantileNet, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; net.params.len()];
    accumulate_output_gradient(&net.params, net.d, net.hidden, x, 1.0, &mut g);
    g
}

/// Adds `scale * d f(x) / d params` to `g`, returning `f(x)`.
fn accumulate_output_gradient(
    p: &[f64],
    d: usize,
    j: usize,
    x: &[f64],
    scale: f64,
    g: &mut [f64],
) -> f64 {
    let mut out = p[p.len() - 1];
    let (bo, vo, co) = (j * d, j * d + j, j * d + 2 * j);
    for h in 0..j {
        let a: f64 = p[h * d..(h + 1) * d]
            .iter()
            .zip(x)
            .map(|(wi, xi)| wi * xi)
            .sum::<f64>()
            + p[bo + h];
        let s = sigmoid(a);
        let v = p[vo + h];
        out += v * s;
        g[vo + h] += scale * s;
        let back = scale * v * s * (1.0 - s);
        g[bo + h] += back;
        for k in 0..d {
            g[h * d + k] += back * x[k];
        }
    }
    g[co] += scale;
    out
}

/// Training objective on standardised data: mean smoothed pinball plus weight decay.
pub struct NnObjective<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub d: usize,
    pub hidden: usize,
    pub tau: f64,
    pub lambda: f64,
}

impl NnObjective<'_> {
    fn penalty_ranges(&self) -> [(usize, usize); 2] {
        let j = self.hidden;
        [(0, j * self.d), (j * self.d + j, j * self.d + 2 * j)]
    }

    /// Smoothed objective at width `eta`, writing the gradient into `g`.
    pub fn smoothed(&self, p: &[f64], eta: f64, g: &mut [f64]) -> f64 {
        g.iter_mut().for_each(|v| *v = 0.0);
        let n = self.y.len();
        let inv_n = 1.0 / n as f64;
        let mut val = 0.0;
        let mut tmp = vec![0.0; p.len()];
        for i in 0..n {
            let xi = &self.x[i * self.d..(i + 1) * self.d];
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let f = accumulate_output_gradient(p, self.d, self.hidden, xi, 1.0, &mut tmp);
            let (l, dl) = smoothed_pinball_with_grad(self.tau, eta, self.y[i] - f);
            val += l * inv_n;
            let s = -dl * inv_n;
            for (gk, tk) in g.iter_mut().zip(&tmp) {
                *gk += s * tk;
            }
        }
        for (a, b) in self.penalty_ranges() {
            for k in a..b {
                val += self.lambda * p[k] * p[k];
                g[k] += 2.0 * self.lambda * p[k];
            }
        }
        val
    }

    /// Unsmoothed regularised risk.
    pub fn exact(&self, p: &[f64]) -> f64 {
        let n = self.y.len();
        let mut val = 0.0;
        for i in 0..n {
            let f = raw_forward(
                p,
                self.d,
                self.hidden,
                &self.x[i * self.d..(i + 1) * self.d],
            );
            val += pinball(self.tau, self.y[i] - f);
        }
        val /= n as f64;
        for (a, b) in self.penalty_ranges() {
            val += self.lambda * p[a..b].iter().map(|w| w * w).sum::<f64>();
        }
        val
    }
}

/// Training settings other than the tuned `lambda` and hidden width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnOptions {
    /// Decreasing smoothing widths; each stage warm-starts from the previous optimum.
    pub schedule: Vec<f64>,
    pub n_multistart: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for NnOptions {
    fn default() -> Self {
        NnOptions {
            schedule: default_schedule(),
            n_multistart: 5,
            max_iter: 500,
            grad_tol: 1e-6,
            seed: 0,
        }
    }
}

/// `2^{-K}` for `K` in 1, 2, 5, 10, ..., 35.
pub fn default_schedule() -> Vec<f64> {
    [1, 2, 5, 10, 15, 20, 25, 30, 35]
        .iter()
        .map(|&k| 0.5f64.powi(k))
        .collect()
}

/// One annealing stage: smoothed objective before and after optimisation, plus exact risk after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub eta: f64,
    pub start: f64,
    pub end: f64,
    pub exact_risk: f64,
    pub iterations: usize,
}

/// Fitted network with the per-start annealing trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnModel {
    pub net: MlpQuantileNet,
    pub tau: QuantileLevel,
    pub lambda: f64,
    pub trace: Vec<Vec<StageRecord>>,
    pub chosen_start: usize,
}

impl NnModel {
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.net.predict_one(x)
    }
}

fn standardize(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (
        mean,
        if sd > 1e-12 * (1.0 + mean.abs()) {
            sd
        } else {
            1.0
        },
    )
}

/// Trains a quantile network with `hidden` sigmoid units and weight decay `lambda`.
pub fn nn_train(
    data: &Dataset,
    tau: QuantileLevel,
    lambda: f64,
    hidden: usize,
    opts: &NnOptions,
) -> Result<NnModel> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    if hidden == 0 {
        return Err(Error::invalid("at least one hidden unit required"));
    }
    if opts.schedule.is_empty()
        || opts.schedule.iter().any(|e| !(*e > 0.0))
        || opts.schedule.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::invalid(
            "smoothing schedule must be positive and strictly decreasing",
        ));
    }
    let d = data.dim();
    let mut x_shift = vec![0.0; d];
    let mut x_scale = vec![1.0; d];
    for k in 0..d {
        (x_shift[k], x_scale[k]) = standardize(&data.x().rows().map(|r| r[k]).collect::<Vec<_>>());
    }
    let (y_shift, y_scale) = standardize(data.y());
    let xs: Vec<f64> = data
        .x()
        .rows()
        .flat_map(|r| {
            r.iter()
                .enumerate()
                .map(|(k, v)| (v - x_shift[k]) / x_scale[k])
                .collect::<Vec<_>>()
        })
        .collect();
    let ys: Vec<f64> = data.y().iter().map(|v| (v - y_shift) / y_scale).collect();
    let obj = NnObjective {
        x: &xs,
        y: &ys,
        d,
        hidden,
        tau: tau.get(),
        lambda,
    };
    let c0 = quantile_in_place(&mut ys.clone(), tau.get());
    let np = n_params(d, hidden);
    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: opts.grad_tol,
        ..Default::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut trace = Vec::with_capacity(opts.n_multistart);
    for start in 0..opts.n_multistart.max(1) {
        let mut p: Vec<f64> = vec![0.0; np];
        let fan_in = 1.0 / (d as f64).sqrt();
        let fan_hidden = 1.0 / (hidden as f64).sqrt();
        for (k, v) in p.iter_mut().enumerate() {
            let scale = if k < hidden * d + hidden {
                fan_in
            } else {
                fan_hidden
            };
            *v = (rng.random::<f64>() - 0.5) * scale;
        }
        p[np - 1] = c0;
        let mut stages = Vec::with_capacity(opts.schedule.len());
        let mut diverged = false;
        for &eta in &opts.schedule {
            let mut g = vec![0.0; np];
            let start_val = obj.smoothed(&p, eta, &mut g);
            let r = bfgs_minimize(|q, g| obj.smoothed(q, eta, g), &p, &bopts);
            if !r.f.is_finite() || r.x.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            p = r.x;
            stages.push(StageRecord {
                eta,
                start: start_val,
                end: r.f,
                exact_risk: obj.exact(&p),
                iterations: r.iterations,
            });
        }
        trace.push(stages);
        if diverged {
            continue;
        }
        let risk = obj.exact(&p);
        if best.as_ref().is_none_or(|b| risk < b.0) {
            best = Some((risk, p, start));
        }
    }
    let (_, params, chosen_start) =
        best.ok_or_else(|| Error::numerical("every network start diverged"))?;
    let net = MlpQuantileNet {
        d,
        hidden,
        params,
        x_shift,
        x_scale,
        y_shift,
        y_scale,
    };
    Ok(NnModel {
        net,
        tau,
        lambda,
        trace,
        chosen_start,
    })
}
