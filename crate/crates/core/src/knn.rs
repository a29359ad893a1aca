//! K-nearest-neighbour conditional quantiles.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QuantileLevel};
use crate::metrics::quantile_in_place;
use crate::prelude::*;

/// Lazy learner: keeps the training set and answers queries by a brute-force scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    tau: QuantileLevel,
    data: Dataset,
}

pub fn knn_fit(data: &Dataset, tau: QuantileLevel, k: usize) -> Result<KnnModel> {
    if k == 0 || k > data.len() {
        return Err(Error::invalid(format!(
            "K must lie in [1, {}], got {k}",
            data.len()
        )));
    }
    Ok(KnnModel {
        k,
        tau,
        data: data.clone(),
    })
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tau(&self) -> QuantileLevel {
        self.tau
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Indices of the `K` Euclidean-nearest training points; ties go to the lower index.
    pub fn neighbors(&self, x: &[f64]) -> Vec<usize> {
        let pts = self.data.x();
        let mut cand: Vec<(f64, usize)> = pts
            .rows()
            .enumerate()
            .map(|(i, r)| {
                (
                    r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                    i,
                )
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < cand.len() {
            cand.select_nth_unstable_by(self.k - 1, cmp);
            cand.truncate(self.k);
        }
        cand.sort_unstable_by(cmp);
        cand.into_iter().map(|(_, i)| i).collect()
    }

    /// Responses of the neighbourhood of `x`.
    pub fn neighbor_values(&self, x: &[f64]) -> Vec<f64> {
        self.neighbors(x)
            .into_iter()
            .map(|i| self.data.y()[i])
            .collect()
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        let mut vals = self.neighbor_values(x);
        quantile_in_place(&mut vals, self.tau.get())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Domain, Points};
    use crate::metrics::empirical_quantile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lvl(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn line(y: &[f64]) -> Dataset {
        let x: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
        Dataset::new(
            Points::from_scalars(&x),
            y.to_vec(),
            Domain::new(vec![(0.0, y.len() as f64)]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn range_of_k() {
        let ds = line(&[1.0; 10]);
        assert!(knn_fit(&ds, lvl(0.5), 10).is_ok());
        assert!(knn_fit(&ds, lvl(0.5), 11).is_err());
        assert!(knn_fit(&ds, lvl(0.5), 0).is_err());
    }

    #[test]
    fn worked_example() {
        let m = knn_fit(&line(&[10.0, 20.0, 30.0]), lvl(0.9), 2).unwrap();
        assert_eq!(m.predict_one(&[0.1]), 20.0);
    }

    #[test]
    fn one_neighbour_returns_own_response() {
        let ds = line(&[4.0, -1.0, 7.5, 2.0]);
        let m = knn_fit(&ds, lvl(0.3), 1).unwrap();
        for i in 0..4 {
            assert_eq!(m.predict_one(ds.x().row(i)), ds.y()[i]);
        }
    }

    #[test]
    fn full_neighbourhood_is_the_unconditional_quantile() {
        let ds = line(&[4.0, -1.0, 7.5, 2.0, 3.0]);
        let m = knn_fit(&ds, lvl(0.7), 5).unwrap();
        let q = empirical_quantile(ds.y(), lvl(0.7)).unwrap();
        for x in [-3.0, 0.2, 4.9] {
            assert_eq!(m.predict_one(&[x]), q);
        }
    }

    #[test]
    fn equidistant_ties_prefer_lower_index() {
        let m = knn_fit(&line(&[5.0, 6.0, 7.0]), lvl(0.5), 1).unwrap();
        assert_eq!(m.neighbors(&[0.5]), vec![0]);
    }

    #[test]
    fn matches_a_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..30 {
            let n = rng.random_range(5..120);
            let d = rng.random_range(1..6);
            let x: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let ds = Dataset::new(Points::new(n, d, x).unwrap(), y, Domain::unit(d)).unwrap();
            let k = rng.random_range(1..=n);
            let tau = rng.random_range(0.01..0.99);
            let m = knn_fit(&ds, lvl(tau), k).unwrap();
            let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let mut all: Vec<(f64, usize)> = (0..n)
                .map(|i| {
                    (
                        ds.x()
                            .row(i)
                            .iter()
                            .zip(&q)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum(),
                        i,
                    )
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let vals: Vec<f64> = all[..k].iter().map(|&(_, i)| ds.y()[i]).collect();
            assert_eq!(
                m.predict_one(&q),
                empirical_quantile(&vals, lvl(tau)).unwrap()
            );
        }
    }

    #[test]
    fn monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..40).map(|_| rng.random::<f64>()).collect();
        let ds = line(&y);
        let mut prev = f64::NEG_INFINITY;
        for t in 1..20 {
            let v = knn_fit(&ds, lvl(t as f64 / 20.0), 9)
                .unwrap()
                .predict_one(&[13.2]);
            assert!(v >= prev);
            prev = v;
        }
    }
}
