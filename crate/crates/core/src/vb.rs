//! Variational-Bayes GP quantile regression: asymmetric-Laplace likelihood
//! written as a Gaussian scale mixture, variational EM over the latent
//! quantile function, the mixing weights and the scale.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Points, QuantileLevel};
use crate::designs::{maximin_lhs_unit, random_lhs, MaximinOptions};
use crate::gp::{log_marginal_likelihood, GpPredictor, Matern52};
use crate::metrics::{empirical_quantile, pinball, pinball_risk};
use crate::optim::{bfgs_minimize, BfgsOptions};
use crate::prelude::*;
use crate::qk::kernel_log_box;
use crate::special::{digamma, ln_gamma, trigamma};

/// Shape and rate of the inverse-gamma prior on the scale.
pub const SCALE_PRIOR: f64 = 1e-6;
/// Floor applied to the mixing-weight GIG parameter `beta`.
pub const BETA_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Asymmetric-Laplace log-likelihood `sum log(tau(1-tau)/sigma) - l_tau(y-q)/sigma`.
pub fn laplace_loglik(y: &[f64], q: &[f64], tau: QuantileLevel, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(
            "the Laplace scale must be positive and finite",
        ));
    }
    if y.len() != q.len() {
        return Err(Error::invalid("responses and quantiles differ in length"));
    }
    let t = tau.get();
    let norm = (t * (1.0 - t) / sigma).ln();
    Ok(y.iter()
        .zip(q)
        .map(|(yi, qi)| norm - pinball(t, yi - qi) / sigma)
        .sum())
}

/// `E(1/sigma)` under `IG(a, b)`.
pub fn ig_inv_mean(a: f64, b: f64) -> f64 {
    a / b
}

/// `E(1/sigma^2)` under `IG(a, b)`.
pub fn ig_inv_second_moment(a: f64, b: f64) -> f64 {
    a * (a + 1.0) / (b * b)
}

/// `E(1/w)` under the order-1/2 GIG with density proportional to `w^{-1/2} exp(-(alpha w + beta / w) / 2)`.
pub fn gig_half_inv_mean(alpha: f64, beta: f64) -> f64 {
    (alpha / beta).sqrt()
}

/// The GIG `alpha` parameter shared by every mixing weight.
pub fn gig_alpha(tau: QuantileLevel) -> f64 {
    let t = tau.get();
    (1.0 - 2.0 * t).powi(2) / (2.0 * t * (1.0 - t)) + 2.0
}

/// Sufficient statistics entering the scale objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleStats {
    pub n: f64,
    pub gamma: f64,
    pub delta: f64,
}

/// Scale objective `J(a, b)` and its gradient in `(a, b)`.
pub fn scale_objective(a: f64, b: f64, s: &ScaleStats) -> (f64, [f64; 2]) {
    let a0 = SCALE_PRIOR;
    let g = s.gamma + SCALE_PRIOR;
    let lb = b.ln();
    let value = (a - s.n - a0) * (lb - digamma(a)) + (b - g) * a / b
        - s.delta * a * (a + 1.0) / (b * b)
        - a * lb
        + ln_gamma(a);
    let da = -(a - s.n - a0) * trigamma(a) + 1.0 - g / b - s.delta * (2.0 * a + 1.0) / (b * b);
    let db = -(s.n + a0) / b + g * a / (b * b) + 2.0 * s.delta * a * (a + 1.0) / (b * b * b);
    (value, [da, db])
}

/// Maximises `J` over `(a, b)` in log space from `(a, b)` and four shifted starts.
pub fn maximize_scale(a: f64, b: f64, s: &ScaleStats) -> Result<(f64, f64)> {
    let opts = BfgsOptions {
        max_iter: 500,
        grad_tol: 1e-8,
        f_rel_tol: 0.0,
        bounds: None,
    };
    let mut f = |p: &[f64], g: &mut [f64]| {
        let (a, b) = (p[0].exp(), p[1].exp());
        let (v, [da, db]) = scale_objective(a, b, s);
        g[0] = -da * a;
        g[1] = -db * b;
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let base = [a.ln(), b.ln()];
    let mut best: Option<(f64, [f64; 2])> = None;
    for shift in [[0.0, 0.0], [2.0, 2.0], [-2.0, -2.0], [2.0, 0.0], [0.0, 2.0]] {
        let x0 = [base[0] + shift[0], base[1] + shift[1]];
        let r = bfgs_minimize(&mut f, &x0, &opts);
        if r.f.is_finite() && best.is_none_or(|(v, _)| r.f < v) {
            best = Some((r.f, [r.x[0], r.x[1]]));
        }
    }
    match best {
        Some((_, p)) if p[0].exp().is_finite() && p[1].exp() > 0.0 && p[1].exp().is_finite() => {
            Ok((p[0].exp(), p[1].exp()))
        }
        _ => Err(Error::NoConvergence {
            iterations: 500,
            detail: "scale objective maximisation failed".into(),
        }),
    }
}

/// Variational state: Gaussian posterior of the latent quantiles, GIG
/// parameters of the mixing weights, IG parameters of the scale and kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbState {
    pub mu: Vec<f64>,
    /// Row-major `n x n` posterior covariance.
    pub sigma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub a: f64,
    pub b: f64,
    pub kernel: Matern52,
}

impl VbState {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma_at(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.len() + j]
    }

    pub fn inv_sigma_mean(&self) -> f64 {
        ig_inv_mean(self.a, self.b)
    }

    pub fn inv_sigma_sq_mean(&self) -> f64 {
        ig_inv_second_moment(self.a, self.b)
    }

    pub fn inv_w_means(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| gig_half_inv_mean(*a, *b))
            .collect()
    }

    /// Diagonal of `D`.
    pub fn precision(&self, tau: QuantileLevel) -> Vec<f64> {
        let t = tau.get();
        let s2 = self.inv_sigma_sq_mean();
        self.inv_w_means()
            .iter()
            .map(|w| 0.5 * t * (1.0 - t) * s2 * w)
            .collect()
    }

    /// Pseudo-observations `D^{-1} c` and pseudo-noise `D^{-1}` of the equivalent GP regression.
    pub fn pseudo_data(&self, y: &[f64], tau: QuantileLevel) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.precision(tau);
        if d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::numerical(
                "variational precision is not positive and finite",
            ));
        }
        let shift = 0.5 * (1.0 - 2.0 * tau.get()) * self.inv_sigma_mean();
        let obs = y.iter().zip(&d).map(|(yi, di)| yi - shift / di).collect();
        Ok((obs, d.iter().map(|di| 1.0 / di).collect()))
    }
}

/// Initial state before the first E-step.
pub fn initial_state(data: &Dataset, tau: QuantileLevel) -> Result<VbState> {
    let y = data.y();
    let n = y.len();
    let q0 = empirical_quantile(y, tau)?;
    let alpha = gig_alpha(tau);
    let risk = pinball_risk(tau.get(), y, &vec![q0; n]);
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let lengthscales = (0..data.dim())
        .map(|j| {
            let (lo, hi) = data
                .x()
                .rows()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| {
                    (l.min(r[j]), h.max(r[j]))
                });
            let range = if hi > lo {
                hi - lo
            } else {
                data.domain().width(j)
            };
            0.25 * range
        })
        .collect();
    let kernel = Matern52::new(if var > 0.0 { var } else { 1.0 }, lengthscales)?;
    let mut sigma = vec![0.0; n * n];
    for i in 0..n {
        sigma[i * n + i] = kernel.variance;
    }
    Ok(VbState {
        mu: vec![q0; n],
        sigma,
        alpha: vec![alpha; n],
        beta: vec![alpha; n],
        a: 2.0,
        b: (2.0 * risk).max(1e-8 * (1.0 + q0.abs())),
        kernel,
    })
}

/// Gaussian posterior `(mu, Sigma)` of the latent quantiles under `kernel` with the state's `D`.
fn latent_posterior(
    state: &VbState,
    kernel: &Matern52,
    data: &Dataset,
    tau: QuantileLevel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (obs, noise) = state.pseudo_data(data.y(), tau)?;
    let post = GpPredictor::new(kernel.clone(), data.x().clone(), obs, noise)?.posterior(data.x());
    let n = data.len();
    let mut sigma = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let c = post.covariance(i, j);
            sigma[i * n + j] = c;
            sigma[j * n + i] = c;
        }
    }
    Ok((post.mean, sigma))
}

/// Diagnostics of one E-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EStepInfo {
    /// Number of `beta` values raised to [`BETA_FLOOR`].
    pub floored: usize,
}

/// One E-step: latent posterior, mixing-weight GIGs, then the scale.
pub fn e_step(state: &VbState, data: &Dataset, tau: QuantileLevel) -> Result<(VbState, EStepInfo)> {
    let t = tau.get();
    let y = data.y();
    let (mu, sigma) = latent_posterior(state, &state.kernel, data, tau)?;
    let n = y.len();
    let sq: Vec<f64> = (0..n)
        .map(|i| (y[i] - mu[i]).powi(2) + sigma[i * n + i].max(0.0))
        .collect();
    let s2 = state.inv_sigma_sq_mean();
    let mut floored = 0;
    let beta: Vec<f64> = sq
        .iter()
        .map(|v| {
            let b = 0.5 * t * (1.0 - t) * s2 * v;
            if b > BETA_FLOOR {
                b
            } else {
                floored += 1;
                BETA_FLOOR
            }
        })
        .collect();
    let alpha = vec![gig_alpha(tau); n];
    let stats = ScaleStats {
        n: n as f64,
        gamma: -0.5 * (1.0 - 2.0 * t) * y.iter().zip(&mu).map(|(yi, mi)| yi - mi).sum::<f64>(),
        delta: 0.25
            * t
            * (1.0 - t)
            * (0..n)
                .map(|i| gig_half_inv_mean(alpha[i], beta[i]) * sq[i])
                .sum::<f64>(),
    };
    let (a, b) = maximize_scale(state.a, state.b, &stats)?;
    Ok((
        VbState {
            mu,
            sigma,
            alpha,
            beta,
            a,
            b,
            kernel: state.kernel.clone(),
        },
        EStepInfo { floored },
    ))
}

/// Lower bound `L(theta) = (mu' Sigma^{-1} mu - log|D^{-1} + K|) / 2` with `D` frozen,
/// and its gradient in the kernel's log parameters.
pub fn lower_bound(
    kernel: &Matern52,
    state: &VbState,
    data: &Dataset,
    tau: QuantileLevel,
) -> Result<(f64, Vec<f64>)> {
    let (obs, noise) = state.pseudo_data(data.y(), tau)?;
    let (lml, grad) = log_marginal_likelihood(kernel, data.x(), &obs, &noise)?;
    let quad: f64 = obs.iter().zip(&noise).map(|(o, v)| o * o / v).sum();
    Ok((lml + 0.5 * quad + 0.5 * obs.len() as f64 * LN_2PI, grad))
}

/// M-step options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MStepOptions {
    /// Starts besides the current kernel.
    pub extra_starts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for MStepOptions {
    fn default() -> Self {
        MStepOptions {
            extra_starts: 0,
            max_iter: 100,
            seed: 0,
        }
    }
}

fn kernel_box(data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let widths: Vec<f64> = (0..data.dim()).map(|j| data.domain().width(j)).collect();
    kernel_log_box(data.y(), &widths)
}

/// `k` space-filling points of the box `lo..hi`.
fn box_starts(k: usize, lo: &[f64], hi: &[f64], seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = if k >= 2 {
        maximin_lhs_unit(
            k,
            lo.len(),
            &mut rng,
            MaximinOptions {
                n_restarts: 5,
                n_swaps: 200,
            },
        )?
    } else {
        random_lhs(k, lo.len(), &mut rng)
    };
    Ok(unit
        .rows()
        .map(|u| {
            u.iter()
                .zip(lo.iter().zip(hi))
                .map(|(t, (l, h))| l + t * (h - l))
                .collect()
        })
        .collect())
}

/// Maximises the lower bound over the kernel in log space, warm-started at the state's kernel.
pub fn m_step(
    state: &VbState,
    data: &Dataset,
    tau: QuantileLevel,
    opts: &MStepOptions,
) -> Result<(Matern52, f64)> {
    let (lo, hi) = kernel_box(data);
    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        grad_tol: 1e-6,
        f_rel_tol: 1e-12,
        bounds: Some((lo.clone(), hi.clone())),
    };
    let mut neg = |p: &[f64], g: &mut [f64]| match Matern52::from_log_params(p)
        .and_then(|k| lower_bound(&k, state, data, tau))
    {
        Ok((v, grad)) if v.is_finite() => {
            for (gi, x) in g.iter_mut().zip(grad) {
                *gi = -x;
            }
            -v
        }
        _ => f64::INFINITY,
    };
    let current: Vec<f64> = state
        .kernel
        .log_params()
        .iter()
        .zip(lo.iter().zip(&hi))
        .map(|(p, (l, h))| p.clamp(*l, *h))
        .collect();
    let mut starts = vec![current];
    if opts.extra_starts > 0 {
        starts.extend(box_starts(opts.extra_starts, &lo, &hi, opts.seed)?);
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in &starts {
        let r = bfgs_minimize(&mut neg, s, &bopts);
        if r.f.is_finite() && best.as_ref().is_none_or(|(v, _)| r.f < *v) {
            best = Some((r.f, r.x));
        }
    }
    let (f, p) =
        best.ok_or_else(|| Error::numerical("lower bound is not finite at any M-step start"))?;
    Ok((Matern52::from_log_params(&p)?, -f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VbOptions {
    pub n_it: usize,
    /// Full EM runs; `None` means 20 per kernel hyperparameter.
    pub n_em_starts: Option<usize>,
    pub m_step: MStepOptions,
    pub seed: u64,
}

impl Default for VbOptions {
    fn default() -> Self {
        VbOptions {
            n_it: 50,
            n_em_starts: None,
            m_step: MStepOptions::default(),
            seed: 0,
        }
    }
}

/// Per-iteration record of an EM run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VbIteration {
    pub lower_bound: f64,
    pub a: f64,
    pub b: f64,
    pub floored: usize,
}

/// Fitted variational quantile model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VbModel {
    pub state: VbState,
    pub tau: QuantileLevel,
    /// Lower bound of the final state.
    pub lower_bound: f64,
    /// Trace of the selected EM run.
    pub trace: Vec<VbIteration>,
    /// Final lower bound of every EM start, `NaN` for failed starts.
    pub start_bounds: Vec<f64>,
    predictor: GpPredictor,
}

impl VbModel {
    pub fn inputs(&self) -> &Points {
        self.predictor.inputs()
    }

    /// Predictive mean and variance of the latent quantile.
    pub fn predict_one(&self, x: &[f64]) -> (f64, f64) {
        self.predictor.predict_one(x)
    }
}

/// Predictive mean and variance at `x`.
pub fn vb_predict(model: &VbModel, x: &[f64]) -> (f64, f64) {
    model.predict_one(x)
}

struct EmRun {
    state: VbState,
    bound: f64,
    trace: Vec<VbIteration>,
}

fn em_run(
    data: &Dataset,
    tau: QuantileLevel,
    init: VbState,
    opts: &VbOptions,
    stream: u64,
) -> Result<EmRun> {
    let mut state = init;
    let mut trace = Vec::with_capacity(opts.n_it);
    for it in 0..opts.n_it {
        let (next, info) = e_step(&state, data, tau)?;
        let mopts = MStepOptions {
            seed: crate::derive_seed(opts.m_step.seed, (stream << 32) | it as u64),
            ..opts.m_step.clone()
        };
        let (kernel, bound) = m_step(&next, data, tau, &mopts)?;
        state = VbState { kernel, ..next };
        trace.push(VbIteration {
            lower_bound: bound,
            a: state.a,
            b: state.b,
            floored: info.floored,
        });
    }
    let (mu, sigma) = latent_posterior(&state, &state.kernel, data, tau)?;
    let bound = lower_bound(&state.kernel, &state, data, tau)?.0;
    Ok(EmRun {
        state: VbState { mu, sigma, ..state },
        bound,
        trace,
    })
}

/// Runs variational EM from several kernel initialisations and keeps the run with the largest final bound.
pub fn vb_fit(data: &Dataset, tau: QuantileLevel, opts: &VbOptions) -> Result<VbModel> {
    vb_fit_until(data, tau, opts, || false).map(|(m, _)| m)
}

/// As [`vb_fit`], but consults `stop` before every EM start after the first
/// and returns early when it answers `true`; the flag reports an early return.
pub fn vb_fit_until<S: FnMut() -> bool>(
    data: &Dataset,
    tau: QuantileLevel,
    opts: &VbOptions,
    mut stop: S,
) -> Result<(VbModel, bool)> {
    if data.len() < 2 {
        return Err(Error::invalid("variational fit needs at least two points"));
    }
    let base = initial_state(data, tau)?;
    let dim = data.dim() + 1;
    let n_starts = opts.n_em_starts.unwrap_or(20 * dim).max(1);
    let mut inits = vec![base.clone()];
    if n_starts > 1 {
        let (lo, hi) = kernel_box(data);
        for p in box_starts(n_starts - 1, &lo, &hi, opts.seed)? {
            inits.push(VbState {
                kernel: Matern52::from_log_params(&p)?,
                ..base.clone()
            });
        }
    }
    let mut best: Option<EmRun> = None;
    let mut start_bounds = Vec::with_capacity(inits.len());
    let mut last_err = None;
    let mut stopped = false;
    for (s, init) in inits.into_iter().enumerate() {
        if s > 0 && stop() {
            stopped = true;
            break;
        }
        match em_run(data, tau, init, opts, s as u64) {
            Ok(run) if run.bound.is_finite() => {
                start_bounds.push(run.bound);
                if best.as_ref().is_none_or(|b| run.bound > b.bound) {
                    best = Some(run);
                }
            }
            Ok(_) => start_bounds.push(f64::NAN),
            Err(e) => {
                start_bounds.push(f64::NAN);
                last_err = Some(e);
            }
        }
    }
    let run = best
        .ok_or_else(|| last_err.unwrap_or_else(|| Error::numerical("every EM start diverged")))?;
    let (obs, noise) = run.state.pseudo_data(data.y(), tau)?;
    let predictor = GpPredictor::new(run.state.kernel.clone(), data.x().clone(), obs, noise)?;
    Ok((
        VbModel {
            state: run.state,
            tau,
            lower_bound: run.bound,
            trace: run.trace,
            start_bounds,
            predictor,
        },
        stopped,
    ))
}

/// Dense `n x n` posterior covariance of a state.
pub fn sigma_matrix(state: &VbState) -> DMatrix<f64> {
    let n = state.len();
    DMatrix::from_row_slice(n, n, &state.sigma)
}

/// Posterior mean of a state as a vector.
pub fn mu_vector(state: &VbState) -> DVector<f64> {
    DVector::from_column_slice(&state.mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::quad::{integrate_half_line, integrate_line};
    use crate::special::ln_gamma;
    use rand::Rng;

    fn lvl(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn laplace_examples() {
        assert_eq!(laplace_loglik(&[1.3], &[1.3], lvl(0.5), 0.25).unwrap(), 0.0);
        assert!(laplace_loglik(&[1.0], &[1.0], lvl(0.5), 0.0).is_err());
        let y = [0.3, -1.2, 2.0, 0.7, 0.1];
        let cands = [-1.0, 0.0, 0.2, 0.5, 1.5];
        let by_lik = cands
            .iter()
            .max_by(|a, b| {
                let la = laplace_loglik(&y, &[**a; 5], lvl(0.7), 0.8).unwrap();
                let lb = laplace_loglik(&y, &[**b; 5], lvl(0.7), 0.8).unwrap();
                la.partial_cmp(&lb).unwrap()
            })
            .unwrap();
        let by_risk = cands
            .iter()
            .min_by(|a, b| {
                pinball_risk(0.7, &y, &[**a; 5])
                    .partial_cmp(&pinball_risk(0.7, &y, &[**b; 5]))
                    .unwrap()
            })
            .unwrap();
        assert_eq!(by_lik, by_risk);
        for (t, s) in [(0.1, 0.5), (0.5, 1.0), (0.9, 2.0)] {
            let mass = integrate_line(
                |v| laplace_loglik(&[v], &[0.4], lvl(t), s).unwrap().exp(),
                0.4,
                1e-10,
            );
            assert!((mass - 1.0).abs() < 1e-6, "tau {t}: {mass}");
        }
    }

    fn ig_moment(a: f64, b: f64, k: i32) -> f64 {
        let ln_norm = a * b.ln() - ln_gamma(a);
        integrate_half_line(
            |s| (ln_norm - (a + 1.0) * s.ln() - b / s).exp() * s.powi(-k),
            1e-12,
        )
    }

    fn gig_inv_mean_quadrature(alpha: f64, beta: f64) -> f64 {
        let dens = |w: f64| (-0.5 * w.ln() - 0.5 * (alpha * w + beta / w)).exp();
        integrate_half_line(|w| dens(w) / w, 1e-12) / integrate_half_line(dens, 1e-12)
    }

    #[test]
    fn expectation_examples() {
        assert!((ig_inv_mean(2.0, 4.0) - 0.5).abs() < 1e-15);
        assert!((ig_inv_second_moment(2.0, 4.0) - 0.375).abs() < 1e-15);
        assert!((ig_moment(2.0, 4.0, 1) - 0.5).abs() < 1e-8);
        assert!((ig_moment(2.0, 4.0, 2) - 0.375).abs() < 1e-8);
        assert_eq!(gig_half_inv_mean(4.0, 1.0), 2.0);
        assert!((gig_inv_mean_quadrature(4.0, 1.0) - 2.0).abs() < 1e-6);
        assert_eq!(gig_alpha(lvl(0.5)), 2.0);
    }

    #[test]
    fn expectations_match_quadrature_over_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let (a, b) = (rng.random_range(0.5..20.0), rng.random_range(0.1..10.0));
            let (m1, m2) = (ig_moment(a, b, 1), ig_moment(a, b, 2));
            assert!(
                (m1 - ig_inv_mean(a, b)).abs() <= 1e-6 * m1.max(1.0),
                "a {a} b {b}"
            );
            assert!(
                (m2 - ig_inv_second_moment(a, b)).abs() <= 1e-6 * m2.max(1.0),
                "a {a} b {b}"
            );
            let (al, be) = (rng.random_range(0.5..10.0), rng.random_range(0.05..10.0));
            let e = gig_inv_mean_quadrature(al, be);
            assert!(
                (e - gig_half_inv_mean(al, be)).abs() <= 1e-6 * e.max(1.0),
                "alpha {al} beta {be}"
            );
        }
    }

    #[test]
    fn scale_objective_gradient_and_maximiser() {
        let s = ScaleStats {
            n: 12.0,
            gamma: -0.7,
            delta: 3.1,
        };
        for (a, b) in [(2.0, 1.5), (7.0, 3.0), (0.8, 0.4)] {
            let (_, g) = scale_objective(a, b, &s);
            let h = 1e-6;
            let fa =
                (scale_objective(a + h, b, &s).0 - scale_objective(a - h, b, &s).0) / (2.0 * h);
            let fb =
                (scale_objective(a, b + h, &s).0 - scale_objective(a, b - h, &s).0) / (2.0 * h);
            assert!((fa - g[0]).abs() <= 1e-5 * fa.abs().max(1.0));
            assert!((fb - g[1]).abs() <= 1e-5 * fb.abs().max(1.0));
        }
        let (a, b) = maximize_scale(2.0, 1.0, &s).unwrap();
        let (v, g) = scale_objective(a, b, &s);
        assert!(g[0].abs() * a < 1e-6 && g[1].abs() * b < 1e-6);
        for (da, db) in [(1.01, 1.0), (0.99, 1.0), (1.0, 1.01), (1.0, 0.99)] {
            assert!(scale_objective(a * da, b * db, &s).0 <= v);
        }
    }

    fn small_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n)
            .map(|i| (i as f64 + rng.random::<f64>()) / n as f64)
            .collect();
        let y = xs
            .iter()
            .map(|x| (6.0 * x).sin() + 0.3 * rng.random::<f64>())
            .collect();
        Dataset::new(Points::from_scalars(&xs), y, Domain::unit(1)).unwrap()
    }

    fn iterated_state(data: &Dataset, tau: QuantileLevel, steps: usize) -> VbState {
        let mut s = initial_state(data, tau).unwrap();
        for _ in 0..steps {
            s = e_step(&s, data, tau).unwrap().0;
        }
        s
    }

    #[test]
    fn lower_bound_matches_literal_formula() {
        let data = small_data(8, 1);
        let tau = lvl(0.3);
        let state = iterated_state(&data, tau, 2);
        let kernel = Matern52::new(0.9, vec![0.2]).unwrap();
        let t = tau.get();
        let d = DVector::from_vec(state.precision(tau));
        let k = kernel.gram(data.x());
        let c = DVector::from_iterator(
            8,
            (0..8).map(|i| d[i] * data.y()[i] - 0.5 * (1.0 - 2.0 * t) * state.inv_sigma_mean()),
        );
        let prec = DMatrix::from_diagonal(&d) + k.clone().try_inverse().unwrap();
        let mu = prec.clone().try_inverse().unwrap() * &c;
        let a = k + DMatrix::from_diagonal(&d.map(|v| 1.0 / v));
        let literal = 0.5 * ((mu.transpose() * &prec * &mu)[(0, 0)] - a.determinant().ln());
        let (v, _) = lower_bound(&kernel, &state, &data, tau).unwrap();
        assert!(
            (v - literal).abs() <= 1e-8 * literal.abs().max(1.0),
            "{v} vs {literal}"
        );
    }

    #[test]
    fn lower_bound_gradient_matches_finite_differences() {
        let data = small_data(12, 2);
        let tau = lvl(0.8);
        let state = iterated_state(&data, tau, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-2.5..0.0)];
            let (_, g) =
                lower_bound(&Matern52::from_log_params(&p).unwrap(), &state, &data, tau).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let mut pp = p;
                pp[j] += h;
                let mut pm = p;
                pm[j] -= h;
                let fp = lower_bound(&Matern52::from_log_params(&pp).unwrap(), &state, &data, tau)
                    .unwrap()
                    .0;
                let fm = lower_bound(&Matern52::from_log_params(&pm).unwrap(), &state, &data, tau)
                    .unwrap()
                    .0;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - g[j]).abs() <= 1e-4 * fd.abs().max(1.0),
                    "{fd} vs {}",
                    g[j]
                );
            }
        }
    }

    #[test]
    fn lower_bound_is_permutation_invariant() {
        let data = small_data(9, 4);
        let tau = lvl(0.5);
        let state = iterated_state(&data, tau, 1);
        let perm = [4, 0, 8, 2, 7, 1, 3, 6, 5];
        let pdata = data.subset(&perm).unwrap();
        let pstate = VbState {
            alpha: perm.iter().map(|&i| state.alpha[i]).collect(),
            beta: perm.iter().map(|&i| state.beta[i]).collect(),
            ..state.clone()
        };
        let (v, _) = lower_bound(&state.kernel, &state, &data, tau).unwrap();
        let (pv, _) = lower_bound(&state.kernel, &pstate, &pdata, tau).unwrap();
        assert!((v - pv).abs() <= 1e-10 * v.abs().max(1.0));
    }

    #[test]
    fn m_step_beats_its_starts() {
        let data = small_data(10, 5);
        let tau = lvl(0.5);
        let state = iterated_state(&data, tau, 1);
        let (kernel, bound) = m_step(
            &state,
            &data,
            tau,
            &MStepOptions {
                extra_starts: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(bound >= lower_bound(&state.kernel, &state, &data, tau).unwrap().0 - 1e-12);
        assert!((lower_bound(&kernel, &state, &data, tau).unwrap().0 - bound).abs() < 1e-12);
    }

    #[test]
    fn e_step_keeps_state_valid() {
        let data = small_data(10, 6);
        let tau = lvl(0.2);
        let state = iterated_state(&data, tau, 3);
        let s = sigma_matrix(&state);
        assert!((&s - s.transpose()).amax() == 0.0);
        assert!(s.symmetric_eigenvalues().min() >= -1e-8);
        assert!(state.a > 0.0 && state.b > 0.0);
        assert!(state.alpha.iter().chain(&state.beta).all(|v| *v > 0.0));
        assert_eq!(mu_vector(&state).len(), 10);
    }

    fn quick_opts() -> VbOptions {
        VbOptions {
            n_it: 10,
            n_em_starts: Some(2),
            m_step: MStepOptions {
                max_iter: 20,
                ..Default::default()
            },
            seed: 1,
        }
    }

    #[test]
    fn predictive_matches_dense_formula() {
        let data = small_data(8, 7);
        let tau = lvl(0.7);
        let m = vb_fit(&data, tau, &quick_opts()).unwrap();
        assert_eq!(m.trace.len(), 10);
        assert_eq!(m.start_bounds.len(), 2);
        let k = m.state.kernel.clone();
        let kxx = k.gram(data.x());
        let kinv = kxx.clone().try_inverse().unwrap();
        let mu = mu_vector(&m.state);
        let sig = sigma_matrix(&m.state);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for q in 0..12 {
            let x = if q < 8 {
                data.x().row(q).to_vec()
            } else {
                vec![rng.random::<f64>()]
            };
            let ks = DVector::from_iterator(8, data.x().rows().map(|r| k.eval(&x, r)));
            let w = &kinv * &ks;
            let mean = w.dot(&mu);
            let var = k.variance - ks.dot(&w) + (w.transpose() * &sig * &w)[(0, 0)];
            let (pm, pv) = vb_predict(&m, &x);
            assert!(
                (pm - mean).abs() <= 1e-10 * mean.abs().max(1.0),
                "{pm} vs {mean}"
            );
            assert!(
                (pv - var).abs() <= 1e-10 * k.variance.max(1.0),
                "{pv} vs {var}"
            );
            assert!(pv >= 0.0);
            if q < 8 {
                assert!((pm - m.state.mu[q]).abs() <= 1e-8);
                assert!((pv - m.state.sigma_at(q, q)).abs() <= 1e-8);
            }
        }
        let far = [1e4];
        let (fm, fv) = vb_predict(&m, &far);
        assert!(fm.abs() < 1e-10);
        assert!((fv - k.variance).abs() <= 1e-8 * k.variance);
    }

    #[test]
    fn constant_responses_give_constant_quantile() {
        let xs: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let c = 3.0;
        let data = Dataset::new(Points::from_scalars(&xs), vec![c; 12], Domain::unit(1)).unwrap();
        for tau in [0.5, 0.9] {
            let m = vb_fit(&data, lvl(tau), &quick_opts()).unwrap();
            for v in &m.state.mu {
                assert!((v - c).abs() <= 0.05 * c, "tau {tau}: {v}");
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let data = small_data(10, 9);
        let a = vb_fit(&data, lvl(0.4), &quick_opts()).unwrap();
        let b = vb_fit(&data, lvl(0.4), &quick_opts()).unwrap();
        assert_eq!(a.state, b.state);
        assert!(a.trace.iter().all(|t| t.lower_bound.is_finite()));
        assert!(
            a.lower_bound
                >= a.start_bounds
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
                    - 1e-12
        );
    }
}
