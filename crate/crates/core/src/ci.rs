//! Pointwise confidence intervals for predicted quantiles: Gaussian
//! posterior, Chernoff bounds on a KN neighbourhood and bootstrap refits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Points, QuantileLevel};
use crate::metrics::{quantile_in_place, LEVEL_TOL};
use crate::prelude::*;
use crate::special::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64, level: f64) -> Result<Self> {
        if !(lower <= upper) {
            return Err(Error::invalid(format!(
                "interval bounds out of order: [{lower}, {upper}]"
            )));
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::invalid(format!(
                "confidence level must lie in (0, 1), got {level}"
            )));
        }
        Ok(Interval {
            lower,
            upper,
            level,
        })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// `mean -/+ z sqrt(variance)` with `z` the two-sided standard-normal quantile of `level`.
pub fn bayesian_ci(mean: f64, variance: f64, level: f64) -> Result<Interval> {
    if !(variance >= 0.0) || !mean.is_finite() || !variance.is_finite() {
        return Err(Error::invalid(
            "posterior mean must be finite and variance nonnegative",
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let half = normal_quantile(0.5 * (1.0 + level)) * variance.sqrt();
    Interval::new(mean - half, mean + half, level)
}

/// Bernoulli Kullback-Leibler divergence `KL(p || q)` with `0 log 0 = 0`.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Chernoff interval for the `tau`-quantile from the `K` responses of a KN neighbourhood.
///
/// Bounds are neighbour values whose empirical CDF departs from `tau` by a
/// Bernoulli divergence of at least `log(2 / eta) / K`; when none
/// qualifies on a side, the sample extreme is used.
pub fn knn_chernoff_ci(neighbor_values: &[f64], tau: QuantileLevel, eta: f64) -> Result<Interval> {
    let k = neighbor_values.len();
    if k < 2 {
        return Err(Error::invalid(
            "a Chernoff interval needs at least two neighbours",
        ));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!(
            "risk level must lie in (0, 1), got {eta}"
        )));
    }
    if neighbor_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("neighbour values must be finite"));
    }
    let t = tau.get();
    let mut sorted = neighbor_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = (2.0 / eta).ln();
    let kf = k as f64;
    let cdf = |q: f64| sorted.partition_point(|v| *v <= q) as f64 / kf;
    let far = |p: f64| kf * bernoulli_kl(p, t) >= threshold;
    let upper = sorted.iter().copied().find(|&q| {
        let p = cdf(q);
        p >= t - LEVEL_TOL && far(p)
    });
    let lower = sorted.iter().rev().copied().find(|&q| {
        let p = cdf(q);
        p <= t + LEVEL_TOL && far(p)
    });
    Interval::new(
        lower.unwrap_or(sorted[0]),
        upper.unwrap_or(sorted[k - 1]),
        1.0 - eta,
    )
}

/// Bootstrap intervals on `grid` from `b` refits on resampled data.
///
/// `factory(train, tau, grid)` fits with fixed hyperparameters and
/// predicts on `grid`. More than 10% failed refits is an error.
pub fn bootstrap_ci<F, R>(
    mut factory: F,
    data: &Dataset,
    tau: QuantileLevel,
    grid: &Points,
    b: usize,
    level: f64,
    rng: &mut R,
) -> Result<Vec<Interval>>
where
    F: FnMut(&Dataset, QuantileLevel, &Points) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if b < 20 {
        return Err(Error::invalid(format!(
            "bootstrap needs at least 20 resamples, got {b}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let n = data.len();
    let mut preds: Vec<Vec<f64>> = vec![Vec::with_capacity(b); grid.len()];
    let mut failures = 0;
    for _ in 0..b {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let fitted = data.subset(&idx).and_then(|d| factory(&d, tau, grid));
        match fitted {
            Ok(p) if p.len() == grid.len() && p.iter().all(|v| v.is_finite()) => {
                for (col, v) in preds.iter_mut().zip(p) {
                    col.push(v);
                }
            }
            _ => failures += 1,
        }
    }
    if failures * 10 > b {
        return Err(Error::numerical(format!(
            "{failures} of {b} bootstrap refits failed"
        )));
    }
    let (lo, hi) = (0.5 * (1.0 - level), 0.5 * (1.0 + level));
    preds
        .iter_mut()
        .map(|col| {
            let l = quantile_in_place(col, lo);
            let u = quantile_in_place(col, hi);
            Interval::new(l, u, level)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::knn::knn_fit;
    use crate::metrics::empirical_quantile;
    use crate::problems::make_test_case;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn lvl(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn gaussian_interval_examples() {
        let i = bayesian_ci(2.0, 0.0, 0.9).unwrap();
        assert_eq!((i.lower, i.upper), (2.0, 2.0));
        let i = bayesian_ci(0.0, 1.0, 0.95).unwrap();
        assert!(
            (i.upper - 1.959_963_984_540_054).abs() < 1e-9 && (i.lower + i.upper).abs() < 1e-15
        );
        let w1 = bayesian_ci(0.3, 0.5, 0.9).unwrap().width();
        let w4 = bayesian_ci(0.3, 2.0, 0.9).unwrap().width();
        assert!((w4 / w1 - 2.0).abs() < 1e-12);
        assert!(bayesian_ci(0.0, -1.0, 0.9).is_err());
    }

    #[test]
    fn chernoff_small_neighbourhood_spans_the_range() {
        let i = knn_chernoff_ci(&[1.5, -0.2, 0.7], lvl(0.5), 0.1).unwrap();
        assert_eq!((i.lower, i.upper), (-0.2, 1.5));
    }

    #[test]
    fn chernoff_bounds_are_sample_members_and_bracket_the_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..200 {
            let k = 2 + trial % 150;
            let vals: Vec<f64> = (0..k)
                .map(|_| rng.sample::<f64, _>(StandardNormal).round())
                .collect();
            let tau = lvl(rng.random_range(0.05..0.95));
            let i = knn_chernoff_ci(&vals, tau, rng.random_range(0.01..0.5)).unwrap();
            assert!(vals.contains(&i.lower) && vals.contains(&i.upper));
            assert!(i.contains(empirical_quantile(&vals, tau).unwrap()));
        }
    }

    #[test]
    fn chernoff_coverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = crate::special::normal_quantile(0.9);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| {
                let vals: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
                knn_chernoff_ci(&vals, lvl(0.9), 0.1)
                    .unwrap()
                    .contains(truth)
            })
            .count();
        assert!(
            hits as f64 / trials as f64 >= 0.9,
            "coverage {}",
            hits as f64 / trials as f64
        );
    }

    #[test]
    fn bernoulli_divergence() {
        assert_eq!(bernoulli_kl(0.3, 0.3), 0.0);
        assert!((bernoulli_kl(1.0, 0.5) - 2f64.ln()).abs() < 1e-15);
        assert!((bernoulli_kl(0.0, 0.9) - 10f64.ln()).abs() < 1e-14);
    }

    fn case1(n: usize, seed: u64) -> Dataset {
        let p = make_test_case(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n)
            .map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64)
            .collect();
        let y = xs
            .iter()
            .map(|x| p.sample_response(&[*x], &mut rng).unwrap())
            .collect();
        Dataset::new(Points::from_scalars(&xs), y, p.domain().clone()).unwrap()
    }

    fn knn_factory(train: &Dataset, tau: QuantileLevel, grid: &Points) -> Result<Vec<f64>> {
        let m = knn_fit(train, tau, 20)?;
        Ok(grid.rows().map(|x| m.predict_one(x)).collect())
    }

    #[test]
    fn bootstrap_constant_factory_is_degenerate_and_seeded() {
        let data = Dataset::new(
            Points::from_scalars(&[0.0, 0.5, 1.0]),
            vec![1.0, 2.0, 3.0],
            Domain::unit(1),
        )
        .unwrap();
        let grid = Points::from_scalars(&[0.1, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = bootstrap_ci(
            |_, _, g| Ok(vec![4.0; g.len()]),
            &data,
            lvl(0.5),
            &grid,
            30,
            0.9,
            &mut rng,
        )
        .unwrap();
        assert!(c.iter().all(|i| i.lower == 4.0 && i.upper == 4.0));
        let d = case1(100, 4);
        let a = bootstrap_ci(
            knn_factory,
            &d,
            lvl(0.5),
            &grid,
            20,
            0.9,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = bootstrap_ci(
            knn_factory,
            &d,
            lvl(0.5),
            &grid,
            20,
            0.9,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a, b);
        let fail = bootstrap_ci(
            |_, _, _| Err(Error::numerical("no")),
            &d,
            lvl(0.5),
            &grid,
            20,
            0.9,
            &mut ChaCha8Rng::seed_from_u64(5),
        );
        assert!(fail.is_err());
    }

    #[test]
    fn bootstrap_widens_when_data_halves() {
        let grid =
            Points::from_scalars(&(0..21).map(|i| -0.9 + 0.09 * i as f64).collect::<Vec<_>>());
        let median_width = |n: usize| {
            let d = case1(n, 6);
            let mut w: Vec<f64> = bootstrap_ci(
                knn_factory,
                &d,
                lvl(0.5),
                &grid,
                100,
                0.9,
                &mut ChaCha8Rng::seed_from_u64(7),
            )
            .unwrap()
            .iter()
            .map(Interval::width)
            .collect();
            quantile_in_place(&mut w, 0.5)
        };
        assert!(median_width(100) > median_width(200));
    }
}
