//! Analytic stochastic test problems with exact quantile oracles.
//!
//! Every problem has the form `Y_x = m(x) + s(x) Z` where `Z` is a fixed
//! noise variable and `s` may be negative, so the true quantile is available
//! in closed form (or by one-dimensional inversion for the squared noise).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, QuantileLevel};
use crate::prelude::*;
use crate::special::{normal_cdf, normal_quantile};

const E: f64 = core::f64::consts::E;
const PI: f64 = core::f64::consts::PI;

/// Distribution of the noise variable `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseFamily {
    /// `Z = c_neg * eta` for `eta <= 0`, `c_pos * eta` otherwise, `eta ~ N(0,1)`.
    TwoSlopeNormal { c_neg: f64, c_pos: f64 },
    /// `Z = exp(eta)`, `eta ~ N(0,1)`.
    LogNormal,
    /// `Z = xi^2` with `xi` two-slope normal.
    TwoSlopeNormalSquared { c_neg: f64, c_pos: f64 },
}

impl NoiseFamily {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let eta: f64 = rng.sample(StandardNormal);
        match *self {
            NoiseFamily::TwoSlopeNormal { c_neg, c_pos } => two_slope(eta, c_neg, c_pos),
            NoiseFamily::LogNormal => eta.exp(),
            NoiseFamily::TwoSlopeNormalSquared { c_neg, c_pos } => {
                let xi = two_slope(eta, c_neg, c_pos);
                xi * xi
            }
        }
    }

    /// `tau`-quantile of `Z`.
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        match *self {
            NoiseFamily::TwoSlopeNormal { c_neg, c_pos } => {
                let z = normal_quantile(tau);
                Ok(if tau <= 0.5 { c_neg * z } else { c_pos * z })
            }
            NoiseFamily::LogNormal => Ok(normal_quantile(tau).exp()),
            NoiseFamily::TwoSlopeNormalSquared { c_neg, c_pos } => {
                squared_quantile(tau, c_neg, c_pos)
            }
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match *self {
            NoiseFamily::TwoSlopeNormal { c_neg, c_pos } => {
                normal_cdf(if z <= 0.0 { z / c_neg } else { z / c_pos })
            }
            NoiseFamily::LogNormal => {
                if z <= 0.0 {
                    0.0
                } else {
                    normal_cdf(z.ln())
                }
            }
            NoiseFamily::TwoSlopeNormalSquared { c_neg, c_pos } => squared_cdf(z, c_neg, c_pos),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            NoiseFamily::TwoSlopeNormal { c_neg, c_pos } => (c_pos - c_neg) / (2.0 * PI).sqrt(),
            NoiseFamily::LogNormal => E.sqrt(),
            NoiseFamily::TwoSlopeNormalSquared { c_neg, c_pos } => {
                0.5 * (c_neg * c_neg + c_pos * c_pos)
            }
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            NoiseFamily::TwoSlopeNormal { c_neg, c_pos } => {
                0.5 * (c_neg * c_neg + c_pos * c_pos) - self.mean().powi(2)
            }
            NoiseFamily::LogNormal => (E - 1.0) * E,
            NoiseFamily::TwoSlopeNormalSquared { c_neg, c_pos } => {
                1.5 * (c_neg.powi(4) + c_pos.powi(4)) - self.mean().powi(2)
            }
        }
    }
}

#[inline]
fn two_slope(eta: f64, c_neg: f64, c_pos: f64) -> f64 {
    if eta <= 0.0 {
        c_neg * eta
    } else {
        c_pos * eta
    }
}

fn squared_cdf(t: f64, c_neg: f64, c_pos: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let r = t.sqrt();
    normal_cdf(r / c_pos) - normal_cdf(-r / c_neg)
}

/// Inverts the CDF of `xi^2` by bisection to an absolute tolerance of 1e-10.
fn squared_quantile(tau: f64, c_neg: f64, c_pos: f64) -> Result<f64> {
    let mut hi = c_neg.max(c_pos).powi(2);
    let mut grow = 0;
    while squared_cdf(hi, c_neg, c_pos) < tau {
        hi *= 2.0;
        grow += 1;
        if grow > 200 || !hi.is_finite() {
            return Err(Error::numerical(format!(
                "no upper bracket for the squared-noise quantile at tau={tau} (last t={hi:e})"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..400 {
        if hi - lo <= 1e-10 {
            return Ok(0.5 * (lo + hi));
        }
        let mid = 0.5 * (lo + hi);
        if squared_cdf(mid, c_neg, c_pos) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::numerical(format!(
        "squared-noise quantile bisection stalled at bracket [{lo:e}, {hi:e}]"
    )))
}

/// One of the four analytic benchmark problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestProblem {
    id: u8,
    domain: Domain,
    noise: NoiseFamily,
}

/// Signal-to-noise estimate, with Monte-Carlo standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrEstimate {
    /// `Var_X(E[Y|X]) / E_X(Var[Y|X])`.
    pub snr: f64,
    pub snr_se: f64,
    /// Same ratio with the deterministic part `m(X)` in place of `E[Y|X]`.
    pub mean_part_snr: f64,
    pub mean_part_snr_se: f64,
    pub draws: usize,
}

/// Builds test problem `id` (1 to 4).
pub fn make_test_case(id: u8) -> Result<TestProblem> {
    let (bounds, noise) = match id {
        1 => (
            vec![(-1.0, 1.0)],
            NoiseFamily::TwoSlopeNormal {
                c_neg: 1.0,
                c_pos: 7.0,
            },
        ),
        2 => (
            vec![(-5.0, 5.0), (-3.0, 3.0)],
            NoiseFamily::TwoSlopeNormal {
                c_neg: 1.0,
                c_pos: 5.0,
            },
        ),
        3 => (
            vec![(0.0, 4.0)],
            NoiseFamily::TwoSlopeNormalSquared {
                c_neg: 3.0,
                c_pos: 6.0,
            },
        ),
        4 => (
            vec![
                (-1.0, -0.7),
                (0.0, 1.0),
                (-0.7, -0.3),
                (0.5, 1.0),
                (-1.0, -0.5),
                (-3.0, -2.6),
                (-0.1, 0.0),
                (0.0, 0.1),
                (0.0, 0.8),
            ],
            NoiseFamily::LogNormal,
        ),
        5 => {
            return Err(Error::Unsupported(
                "test case 5 wraps an external crop simulator and is not available".into(),
            ))
        }
        _ => return Err(Error::invalid(format!("unknown test case {id}"))),
    };
    Ok(TestProblem {
        id,
        domain: Domain::new(bounds)?,
        noise,
    })
}

/// Ackley-type function with `a = 10`, `b = 2e-4`, `c = 0.9 pi`.
pub fn ackley(x: &[f64]) -> f64 {
    const A: f64 = 10.0;
    const B: f64 = 2e-4;
    const C: f64 = 0.9 * PI;
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let cs = x.iter().map(|v| (C * v).cos()).sum::<f64>() / n;
    -A * (-B * sq.sqrt()).exp() - cs.exp() + A + E
}

/// Two-dimensional Griewank function.
pub fn griewank(x: &[f64]) -> f64 {
    let sum: f64 = x.iter().map(|v| v * v / 4000.0).sum();
    let prod: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
        .product();
    sum - prod + 1.0
}

fn michalewicz_term(x: f64) -> f64 {
    x.sin() * (x * x / PI).sin().powi(30)
}

impl TestProblem {
    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn noise(&self) -> NoiseFamily {
        self.noise
    }

    /// Deterministic part `m(x)`.
    pub fn mean_part(&self, x: &[f64]) -> f64 {
        match self.id {
            1 => 5.0 * (8.0 * x[0]).sin(),
            2 => 0.0,
            3 => -2.0 * michalewicz_term(x[0]),
            _ => 30.0 * ackley(x),
        }
    }

    /// Noise multiplier `s(x)`; negative values flip the noise.
    pub fn scale_part(&self, x: &[f64]) -> f64 {
        match self.id {
            1 => 0.2 + 3.0 * x[0].powi(3),
            2 => griewank(x),
            3 => {
                let c =
                    0.1 * (PI * x[0] / 10.0).cos().powi(3) / (-michalewicz_term(x[0]) + 2.0).abs();
                -c
            }
            _ => {
                let mut rot = Vec::with_capacity(x.len());
                rot.extend_from_slice(&x[1..]);
                rot.push(x[0]);
                3.0 * ackley(&rot)
            }
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.iter().any(|v| !v.is_finite()) || !self.domain.contains(x) {
            return Err(Error::invalid(
                "query point lies outside the problem domain",
            ));
        }
        Ok(())
    }

    /// One draw of `Y_x`.
    pub fn sample_response<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.sample_unchecked(x, rng))
    }

    pub(crate) fn sample_unchecked<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        self.mean_part(x) + self.scale_part(x) * self.noise.sample(rng)
    }

    /// Exact `tau`-quantile of `Y_x`.
    pub fn true_quantile(&self, x: &[f64], tau: QuantileLevel) -> Result<f64> {
        self.check_point(x)?;
        let m = self.mean_part(x);
        let s = self.scale_part(x);
        if s == 0.0 {
            return Ok(m);
        }
        let level = if s > 0.0 { tau } else { tau.flipped() };
        Ok(m + s * self.noise.quantile(level.get())?)
    }

    /// `P(Y_x <= y)`.
    pub fn conditional_cdf(&self, x: &[f64], y: f64) -> f64 {
        let m = self.mean_part(x);
        let s = self.scale_part(x);
        if s == 0.0 {
            return if y >= m { 1.0 } else { 0.0 };
        }
        let z = (y - m) / s;
        if s > 0.0 {
            self.noise.cdf(z)
        } else {
            1.0 - self.noise.cdf(z)
        }
    }

    pub fn conditional_mean(&self, x: &[f64]) -> f64 {
        self.mean_part(x) + self.scale_part(x) * self.noise.mean()
    }

    pub fn conditional_variance(&self, x: &[f64]) -> f64 {
        self.scale_part(x).powi(2) * self.noise.variance()
    }

    /// Qualitative signal-to-noise class.
    pub fn snr_class(&self) -> &'static str {
        if self.id == 4 {
            "large"
        } else {
            "small"
        }
    }

    /// Qualitative density level near the quantile, for the tabulated levels 0.1, 0.5, 0.9.
    pub fn pdf_class(&self, tau: f64) -> Option<&'static str> {
        let col = [0.1, 0.5, 0.9]
            .iter()
            .position(|t| (t - tau).abs() < 1e-9)?;
        let row: [&'static str; 3] = match self.id {
            1 => ["variable", "variable", "variable"],
            2 => ["small", "large", "very small"],
            3 => ["globally very small", "small", "very large"],
            _ => ["large", "small", "very small"],
        };
        Some(row[col])
    }

    /// Draw a point uniformly from the domain.
    pub fn uniform_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.domain
            .bounds()
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

/// Monte-Carlo signal-to-noise ratio with `X` uniform on the domain.
///
/// Conditional moments are exact, so only `X` is sampled. Standard errors come
/// from 20 batch means.
pub fn snr_estimate<R: Rng + ?Sized>(
    problem: &TestProblem,
    mc_budget: usize,
    rng: &mut R,
) -> Result<SnrEstimate> {
    if mc_budget < 10_000 {
        return Err(Error::invalid(
            "signal-to-noise estimation needs at least 1e4 draws",
        ));
    }
    const BATCHES: usize = 20;
    let per = mc_budget / BATCHES;
    let mut full = [0.0f64; 5];
    let mut ratios = Vec::with_capacity(BATCHES);
    let mut mp_ratios = Vec::with_capacity(BATCHES);
    for _ in 0..BATCHES {
        let mut acc = [0.0f64; 5];
        for _ in 0..per {
            let x = problem.uniform_point(rng);
            let cm = problem.conditional_mean(&x);
            let mp = problem.mean_part(&x);
            let cv = problem.conditional_variance(&x);
            for (a, v) in acc.iter_mut().zip([cm, cm * cm, mp, mp * mp, cv]) {
                *a += v;
            }
        }
        let nb = per as f64;
        ratios.push(moment_ratio(acc[0] / nb, acc[1] / nb, acc[4] / nb));
        mp_ratios.push(moment_ratio(acc[2] / nb, acc[3] / nb, acc[4] / nb));
        for (f, a) in full.iter_mut().zip(acc) {
            *f += a;
        }
    }
    let nt = (per * BATCHES) as f64;
    Ok(SnrEstimate {
        snr: moment_ratio(full[0] / nt, full[1] / nt, full[4] / nt),
        snr_se: batch_se(&ratios),
        mean_part_snr: moment_ratio(full[2] / nt, full[3] / nt, full[4] / nt),
        mean_part_snr_se: batch_se(&mp_ratios),
        draws: per * BATCHES,
    })
}

fn moment_ratio(m1: f64, m2: f64, noise_var: f64) -> f64 {
    let var = (m2 - m1 * m1).max(0.0);
    if var == 0.0 {
        0.0
    } else {
        var / noise_var
    }
}

fn batch_se(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}
