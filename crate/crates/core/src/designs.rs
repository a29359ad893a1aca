//! Space-filling and replicated experimental designs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain, Points, ReplicatedDataset};
use crate::prelude::*;
use crate::problems::TestProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignKind {
    Grid,
    LhsMaximin,
    /// `n_bases` distinct points, each listed `reps` times (base-major).
    Replicated {
        n_bases: usize,
        reps: usize,
    },
}

/// Design points in the domain together with how they were built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub points: Points,
    pub kind: DesignKind,
    pub domain: Domain,
}

/// Search budget for [`maximin_lhs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaximinOptions {
    pub n_restarts: usize,
    pub n_swaps: usize,
}

impl Default for MaximinOptions {
    fn default() -> Self {
        MaximinOptions {
            n_restarts: 50,
            n_swaps: 1000,
        }
    }
}

/// `n` equally spaced points covering a one-dimensional domain, endpoints included.
pub fn uniform_grid(n: usize, domain: &Domain) -> Result<Design> {
    if domain.dim() != 1 {
        return Err(Error::invalid("uniform grids are one-dimensional"));
    }
    if n < 2 {
        return Err(Error::invalid("a grid needs at least two points"));
    }
    let (lo, hi) = domain.bounds()[0];
    let xs: Vec<f64> = (0..n)
        .map(|i| {
            if i + 1 == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    Ok(Design {
        points: Points::from_scalars(&xs),
        kind: DesignKind::Grid,
        domain: domain.clone(),
    })
}

/// Random Latin hypercube in `[0,1)^d`: one point per stratum in every coordinate.
pub fn random_lhs<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Points {
    let mut data = vec![0.0; n * d];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(rng);
        for i in 0..n {
            data[i * d + j] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    Points::new(n, d, data).expect("shape is consistent by construction")
}

/// Smallest pairwise Euclidean distance (infinite for fewer than two points).
pub fn min_pairwise_distance(points: &Points) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(sq_dist(points.row(i), points.row(j)));
        }
    }
    best.sqrt()
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared-distance matrix with each row's nearest neighbour, updated under coordinate swaps.
struct SwapState {
    n: usize,
    d: usize,
    x: Vec<f64>,
    dist: Vec<f64>,
    row_min: Vec<f64>,
    arg_min: Vec<usize>,
}

impl SwapState {
    fn new(p: &Points) -> Self {
        let (n, d) = (p.len(), p.dim());
        let mut s = SwapState {
            n,
            d,
            x: p.as_slice().to_vec(),
            dist: vec![f64::INFINITY; n * n],
            row_min: vec![f64::INFINITY; n],
            arg_min: vec![0; n],
        };
        for i in 0..n {
            for j in i + 1..n {
                let v = sq_dist(&s.x[i * d..(i + 1) * d], &s.x[j * d..(j + 1) * d]);
                s.dist[i * n + j] = v;
                s.dist[j * n + i] = v;
            }
        }
        for i in 0..n {
            s.refresh_row(i);
        }
        s
    }

    fn refresh_row(&mut self, i: usize) {
        let (mut m, mut a) = (f64::INFINITY, i);
        for j in 0..self.n {
            if j != i && self.dist[i * self.n + j] < m {
                m = self.dist[i * self.n + j];
                a = j;
            }
        }
        self.row_min[i] = m;
        self.arg_min[i] = a;
    }

    /// `(min squared distance, sum of nearest-neighbour distances)`; larger is better.
    fn score(&self) -> (f64, f64) {
        let min = self.row_min.iter().cloned().fold(f64::INFINITY, f64::min);
        (min, self.row_min.iter().map(|v| v.sqrt()).sum())
    }

    fn swap(&mut self, a: usize, b: usize, j: usize) {
        let (n, d) = (self.n, self.d);
        self.x.swap(a * d + j, b * d + j);
        for &r in &[a, b] {
            for k in 0..n {
                if k == r {
                    continue;
                }
                let v = sq_dist(&self.x[r * d..(r + 1) * d], &self.x[k * d..(k + 1) * d]);
                self.dist[r * n + k] = v;
                self.dist[k * n + r] = v;
            }
        }
        for k in 0..n {
            if k == a || k == b {
                continue;
            }
            let am = self.arg_min[k];
            if am == a || am == b {
                self.refresh_row(k);
            } else {
                for &r in &[a, b] {
                    let v = self.dist[k * n + r];
                    if v < self.row_min[k] {
                        self.row_min[k] = v;
                        self.arg_min[k] = r;
                    }
                }
            }
        }
        self.refresh_row(a);
        self.refresh_row(b);
    }
}

/// Latin hypercube optimised for the maximin criterion, returned in unit-cube coordinates.
///
/// Each restart draws a random Latin hypercube, then tries `n_swaps` random
/// exchanges of one coordinate between two rows, keeping an exchange when it
/// increases the smallest pairwise distance, or keeps it equal while
/// increasing the summed nearest-neighbour distances. The best restart wins.
pub fn maximin_lhs_unit<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    rng: &mut R,
    opts: MaximinOptions,
) -> Result<Points> {
    if n < 2 || d == 0 {
        return Err(Error::invalid("a maximin design needs n >= 2 and d >= 1"));
    }
    let mut best: Option<((f64, f64), Points)> = None;
    for _ in 0..opts.n_restarts.max(1) {
        let mut st = SwapState::new(&random_lhs(n, d, rng));
        let mut score = st.score();
        for _ in 0..opts.n_swaps {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let j = rng.random_range(0..d);
            let saved = (st.row_min.clone(), st.arg_min.clone());
            let rows_a: Vec<f64> = st.dist[a * n..(a + 1) * n].to_vec();
            let rows_b: Vec<f64> = st.dist[b * n..(b + 1) * n].to_vec();
            st.swap(a, b, j);
            let new = st.score();
            if new.0 > score.0 || (new.0 == score.0 && new.1 > score.1) {
                score = new;
            } else {
                st.x.swap(a * d + j, b * d + j);
                for k in 0..n {
                    st.dist[a * n + k] = rows_a[k];
                    st.dist[k * n + a] = rows_a[k];
                    st.dist[b * n + k] = rows_b[k];
                    st.dist[k * n + b] = rows_b[k];
                }
                st.row_min = saved.0;
                st.arg_min = saved.1;
            }
        }
        let better = match &best {
            None => true,
            Some((s, _)) => score.0 > s.0 || (score.0 == s.0 && score.1 > s.1),
        };
        if better {
            best = Some((score, Points::new(n, d, st.x)?));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn to_domain(unit: &Points, domain: &Domain) -> Points {
    let data: Vec<f64> = unit.rows().flat_map(|r| domain.from_unit(r)).collect();
    Points::new(unit.len(), unit.dim(), data).expect("shape preserved")
}

/// Maximin Latin hypercube in `domain` (distances measured in the unit cube).
pub fn maximin_lhs<R: Rng + ?Sized>(
    n: usize,
    domain: &Domain,
    rng: &mut R,
    opts: MaximinOptions,
) -> Result<Design> {
    let unit = maximin_lhs_unit(n, domain.dim(), rng, opts)?;
    Ok(Design {
        points: to_domain(&unit, domain),
        kind: DesignKind::LhsMaximin,
        domain: domain.clone(),
    })
}

/// Seeded random Latin hypercube in `domain`, without optimisation.
pub fn lhs_points<R: Rng + ?Sized>(n: usize, domain: &Domain, rng: &mut R) -> Points {
    to_domain(&random_lhs(n, domain.dim(), rng), domain)
}

/// Space-filling design: grid in 1d, maximin LHS otherwise.
pub fn space_filling<R: Rng + ?Sized>(
    n: usize,
    domain: &Domain,
    rng: &mut R,
    opts: MaximinOptions,
) -> Result<Design> {
    if domain.dim() == 1 {
        uniform_grid(n, domain)
    } else {
        maximin_lhs(n, domain, rng, opts)
    }
}

/// `n_bases` space-filling bases, each repeated `reps` times.
pub fn replicated_design<R: Rng + ?Sized>(
    n_bases: usize,
    reps: usize,
    domain: &Domain,
    rng: &mut R,
    opts: MaximinOptions,
) -> Result<Design> {
    if reps < 2 {
        return Err(Error::invalid(
            "replicated designs need at least two replicates",
        ));
    }
    let bases = space_filling(n_bases, domain, rng, opts)?.points;
    let mut data = Vec::with_capacity(n_bases * reps * domain.dim());
    for row in bases.rows() {
        for _ in 0..reps {
            data.extend_from_slice(row);
        }
    }
    Ok(Design {
        points: Points::new(n_bases * reps, domain.dim(), data)?,
        kind: DesignKind::Replicated { n_bases, reps },
        domain: domain.clone(),
    })
}

/// One benchmark size level: plain sample size and the replicated `(n', r)` split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeLevel {
    pub n: usize,
    pub qk_bases: usize,
    pub qk_reps: usize,
}

/// The four benchmark sample sizes for dimension `d` (1, 2 or 9).
pub fn standard_sizes(d: usize) -> Result<[SizeLevel; 4]> {
    let s = |n, qk_bases, qk_reps| SizeLevel {
        n,
        qk_bases,
        qk_reps,
    };
    match d {
        1 => Ok([s(40, 5, 8), s(80, 10, 8), s(160, 10, 16), s(320, 16, 20)]),
        2 => Ok([
            s(100, 10, 10),
            s(200, 20, 10),
            s(400, 25, 16),
            s(800, 40, 20),
        ]),
        9 => Ok([
            s(250, 25, 10),
            s(500, 50, 10),
            s(1000, 100, 10),
            s(2000, 100, 20),
        ]),
        _ => Err(Error::invalid(format!(
            "no standard sizes for dimension {d}"
        ))),
    }
}

/// Responses drawn on a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sample {
    Plain(Dataset),
    Replicated(ReplicatedDataset),
}

/// Draws one response per design row from `problem`.
pub fn sample_dataset<R: Rng + ?Sized>(
    problem: &TestProblem,
    design: &Design,
    rng: &mut R,
) -> Result<Sample> {
    let pts = &design.points;
    if let Some(i) = (0..pts.len()).find(|&i| !problem.domain().contains(pts.row(i))) {
        return Err(Error::invalid(format!(
            "design row {i} lies outside the problem domain"
        )));
    }
    let y: Vec<f64> = pts
        .rows()
        .map(|x| problem.sample_unchecked(x, rng))
        .collect();
    match design.kind {
        DesignKind::Replicated { n_bases, reps } => {
            let bases = pts.select(&(0..n_bases).map(|i| i * reps).collect::<Vec<_>>());
            let replicates = y.chunks(reps).map(<[f64]>::to_vec).collect();
            Ok(Sample::Replicated(ReplicatedDataset::new(
                bases,
                replicates,
                problem.domain().clone(),
            )?))
        }
        _ => Ok(Sample::Plain(Dataset::new(
            pts.clone(),
            y,
            problem.domain().clone(),
        )?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_test_case;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dom1(lo: f64, hi: f64) -> Domain {
        Domain::new(vec![(lo, hi)]).unwrap()
    }

    #[test]
    fn grid_examples() {
        assert_eq!(
            uniform_grid(2, &dom1(-1.0, 1.0)).unwrap().points.as_slice(),
            &[-1.0, 1.0]
        );
        assert_eq!(
            uniform_grid(3, &dom1(0.0, 4.0)).unwrap().points.as_slice(),
            &[0.0, 2.0, 4.0]
        );
        let g = uniform_grid(5, &dom1(0.0, 1.0)).unwrap();
        for w in g.points.as_slice().windows(2) {
            assert!((w[1] - w[0] - 0.25).abs() < 1e-15);
        }
        assert!(uniform_grid(3, &Domain::unit(2)).is_err());
        assert!(uniform_grid(1, &dom1(0.0, 1.0)).is_err());
    }

    fn assert_latin(p: &Points) {
        let n = p.len();
        for j in 0..p.dim() {
            let mut strata: Vec<usize> = p
                .rows()
                .map(|r| (r[j] * n as f64).floor() as usize)
                .collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn maximin_keeps_latin_strata_and_improves_on_its_start() {
        for seed in 0..5 {
            let (n, d) = (12 + seed as usize, 3);
            let start = random_lhs(n, d, &mut ChaCha8Rng::seed_from_u64(seed));
            let opt = maximin_lhs_unit(
                n,
                d,
                &mut ChaCha8Rng::seed_from_u64(seed),
                MaximinOptions {
                    n_restarts: 3,
                    n_swaps: 300,
                },
            )
            .unwrap();
            assert_latin(&start);
            assert_latin(&opt);
            assert!(min_pairwise_distance(&opt) >= min_pairwise_distance(&start));
        }
        let two = maximin_lhs_unit(
            2,
            1,
            &mut ChaCha8Rng::seed_from_u64(1),
            MaximinOptions::default(),
        )
        .unwrap();
        let mut v = two.as_slice().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v[0] < 0.5 && v[1] >= 0.5);
    }

    #[test]
    fn incremental_distances_match_a_fresh_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_lhs(15, 2, &mut rng);
        let mut st = SwapState::new(&p);
        for _ in 0..50 {
            let a = rng.random_range(0..15);
            let b = (a + 1 + rng.random_range(0..14)) % 15;
            st.swap(a, b, rng.random_range(0..2));
        }
        let fresh = SwapState::new(&Points::new(15, 2, st.x.clone()).unwrap());
        assert_eq!(st.row_min, fresh.row_min);
    }

    #[test]
    fn standard_size_table() {
        assert_eq!(
            standard_sizes(1).unwrap()[3],
            SizeLevel {
                n: 320,
                qk_bases: 16,
                qk_reps: 20
            }
        );
        assert_eq!(
            standard_sizes(9).unwrap()[0],
            SizeLevel {
                n: 250,
                qk_bases: 25,
                qk_reps: 10
            }
        );
        assert_eq!(
            standard_sizes(2).unwrap()[2],
            SizeLevel {
                n: 400,
                qk_bases: 25,
                qk_reps: 16
            }
        );
        assert!(standard_sizes(3).is_err());
    }

    #[test]
    fn replicated_sampling_groups_by_base() {
        let p = make_test_case(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let design =
            replicated_design(5, 8, p.domain(), &mut rng, MaximinOptions::default()).unwrap();
        assert_eq!(design.points.len(), 40);
        match sample_dataset(&p, &design, &mut rng).unwrap() {
            Sample::Replicated(rd) => {
                assert_eq!((rd.n_bases(), rd.n_replicates()), (5, 8));
            }
            Sample::Plain(_) => panic!("expected a replicated sample"),
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = make_test_case(2).unwrap();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let design = maximin_lhs(
                20,
                p.domain(),
                &mut rng,
                MaximinOptions {
                    n_restarts: 2,
                    n_swaps: 50,
                },
            )
            .unwrap();
            sample_dataset(&p, &design, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
        let grid = uniform_grid(7, make_test_case(1).unwrap().domain()).unwrap();
        match sample_dataset(
            &make_test_case(1).unwrap(),
            &grid,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
        {
            Sample::Plain(ds) => assert_eq!(ds.len(), 7),
            Sample::Replicated(_) => panic!("grid designs are not replicated"),
        }
    }
}
