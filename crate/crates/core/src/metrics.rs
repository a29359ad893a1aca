//! Pinball losses, order-statistic quantiles and benchmark error metrics.

use alloc::collections::BTreeMap;

use crate::data::QuantileLevel;
use crate::prelude::*;

/// Slack used when comparing cumulative proportions against a quantile level,
/// so that `n * tau` landing a rounding error above an integer still selects
/// that integer's order statistic.
pub const LEVEL_TOL: f64 = 1e-12;

/// Pinball loss `(tau - 1{xi<0}) * xi` without input checks.
#[inline]
pub fn pinball(tau: f64, xi: f64) -> f64 {
    if xi < 0.0 {
        (tau - 1.0) * xi
    } else {
        tau * xi
    }
}

/// Checked pinball loss.
pub fn pinball_loss(tau: QuantileLevel, xi: f64) -> Result<f64> {
    if !xi.is_finite() {
        return Err(Error::invalid("pinball loss of a non-finite residual"));
    }
    Ok(pinball(tau.get(), xi))
}

/// Huber-smoothed pinball loss and its derivative in `xi`, without input checks.
///
/// The slope factor is `|tau - 1{xi<0}|` so that the result is the smooth,
/// nonnegative envelope of [`pinball`].
#[inline]
pub fn smoothed_pinball_with_grad(tau: f64, eta: f64, xi: f64) -> (f64, f64) {
    let w = if xi < 0.0 { 1.0 - tau } else { tau };
    let a = xi.abs();
    if a <= eta {
        (w * xi * xi / (2.0 * eta), w * xi / eta)
    } else {
        (w * (a - 0.5 * eta), w * xi.signum())
    }
}

/// Checked smoothed pinball loss.
pub fn smoothed_pinball(tau: QuantileLevel, eta: f64, xi: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!(
            "smoothing width must be positive, got {eta}"
        )));
    }
    if !xi.is_finite() {
        return Err(Error::invalid("smoothed pinball of a non-finite residual"));
    }
    Ok(smoothed_pinball_with_grad(tau.get(), eta, xi).0)
}

/// Mean pinball loss of predictions `q` against responses `y`.
pub fn pinball_risk(tau: f64, y: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(y.len(), q.len());
    if y.is_empty() {
        return 0.0;
    }
    y.iter()
        .zip(q)
        .map(|(&yi, &qi)| pinball(tau, yi - qi))
        .sum::<f64>()
        / y.len() as f64
}

/// Zero-based index of the `ceil(n tau)`-th order statistic of an `n`-sample.
#[inline]
pub fn order_statistic_index(n: usize, tau: f64) -> usize {
    debug_assert!(n >= 1);
    let nf = n as f64;
    let k = (nf * tau - LEVEL_TOL * nf).ceil();
    (k.max(1.0).min(nf) as usize) - 1
}

/// `ceil(n tau)`-th smallest element, reordering `sample` in the process.
pub fn quantile_in_place(sample: &mut [f64], tau: f64) -> f64 {
    let k = order_statistic_index(sample.len(), tau);
    *sample.select_nth_unstable_by(k, f64::total_cmp).1
}

/// `ceil(n tau)`-th smallest element of `sample` (never interpolated).
pub fn empirical_quantile(sample: &[f64], tau: QuantileLevel) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::invalid("empirical quantile of an empty sample"));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("empirical quantile of a non-finite sample"));
    }
    let mut buf = sample.to_vec();
    Ok(quantile_in_place(&mut buf, tau.get()))
}

/// Sum of squared differences between predicted and true quantiles.
pub fn e_l2(q_hat: &[f64], q_true: &[f64]) -> Result<f64> {
    if q_hat.len() != q_true.len() {
        return Err(Error::invalid(format!(
            "prediction length {} differs from truth length {}",
            q_hat.len(),
            q_true.len()
        )));
    }
    if q_hat.is_empty() {
        return Err(Error::invalid("error metric on an empty grid"));
    }
    Ok(q_hat
        .iter()
        .zip(q_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Normalises an L2 error by the constant model's, in percent.
pub fn e_cq_from_l2(e_l2_model: f64, e_l2_constant: f64) -> Result<f64> {
    if !(e_l2_constant > 0.0) {
        return Err(Error::DegenerateTruth);
    }
    Ok(100.0 * (e_l2_model / e_l2_constant).sqrt())
}

/// L2 error relative to the constant-quantile model, in percent.
pub fn e_cq(q_hat: &[f64], q_true: &[f64], constant_quantile: f64) -> Result<f64> {
    let num = e_l2(q_hat, q_true)?;
    let den: f64 = q_true
        .iter()
        .map(|q| (constant_quantile - q) * (constant_quantile - q))
        .sum();
    e_cq_from_l2(num, den)
}

/// Ranks methods by ascending error, 1 = best.
///
/// Equal errors are ranked by key order; NaN errors rank after every number.
pub fn rank_methods<K: Ord + Clone>(errors: &BTreeMap<K, f64>) -> Result<BTreeMap<K, usize>> {
    if errors.is_empty() {
        return Err(Error::invalid("no methods to rank"));
    }
    let mut order: Vec<(&K, f64)> = errors
        .iter()
        .map(|(k, &e)| (k, if e.is_nan() { f64::INFINITY } else { e }))
        .collect();
    // Stable sort keeps the key order among ties.
    order.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, (k, _))| (k.clone(), i + 1))
        .collect())
}
