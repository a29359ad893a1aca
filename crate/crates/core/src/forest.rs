//! Quantile regression forest: CART trees on bootstrap resamples combined
//! into a weighted empirical conditional CDF.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QuantileLevel};
use crate::metrics::LEVEL_TOL;
use crate::prelude::*;

/// Sum of squared deviations of each side from its own mean.
pub fn split_score(y_left: &[f64], y_right: &[f64]) -> Result<f64> {
    if y_left.is_empty() || y_right.is_empty() {
        return Err(Error::invalid("a split needs observations on both sides"));
    }
    let sse = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    Ok(sse(y_left) + sse(y_right))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        dim: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        leaf: u32,
    },
}

/// One partitioning tree; leaves list bootstrap indices with their multiplicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
    leaves: Vec<Vec<u32>>,
}

impl Tree {
    /// Index of the leaf containing `x` (points equal to a threshold go left).
    pub fn leaf_id(&self, x: &[f64]) -> usize {
        let mut at = 0usize;
        loop {
            match self.nodes[at] {
                Node::Leaf { leaf } => return leaf as usize,
                Node::Split {
                    dim,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[dim as usize] <= threshold {
                        left
                    } else {
                        right
                    } as usize;
                }
            }
        }
    }

    /// Training indices in leaf `leaf`, repeated per bootstrap multiplicity.
    pub fn leaf_members(&self, leaf: usize) -> &[u32] {
        &self.leaves[leaf]
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// The tree's bootstrap sample, grouped by leaf.
    pub fn bootstrap(&self) -> Vec<u32> {
        self.leaves.concat()
    }

    /// Every `(dim, threshold)` split in the tree.
    pub fn splits(&self) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .filter_map(|n| match *n {
                Node::Split { dim, threshold, .. } => Some((dim as usize, threshold)),
                Node::Leaf { .. } => None,
            })
            .collect()
    }
}

/// Forest settings other than the tuned leaf size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestOptions {
    pub n_trees: usize,
    /// Coordinates tried per split; `None` means `ceil(d/3)`.
    pub d_tilde: Option<usize>,
    /// Resample with replacement per tree; disabling uses every point once.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions {
            n_trees: 10_000,
            d_tilde: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    trees: Vec<Tree>,
    m_s: usize,
    d_tilde: usize,
    tau: QuantileLevel,
    data: Dataset,
    /// Training indices ordered by response.
    y_order: Vec<u32>,
}

struct Grower<'a> {
    data: &'a Dataset,
    m_s: usize,
    d_tilde: usize,
    nodes: Vec<Node>,
    leaves: Vec<Vec<u32>>,
}

impl Grower<'_> {
    fn x(&self, i: u32, j: usize) -> f64 {
        self.data.x().row(i as usize)[j]
    }

    /// Best `(score, dim, threshold)` over `dims`, scanning sorted coordinates with running sums.
    fn best_split(&self, idx: &[u32], dims: &[usize]) -> Option<(f64, usize, f64)> {
        let y = self.data.y();
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| y[i as usize]).sum();
        let sst: f64 = {
            let m = total / n as f64;
            idx.iter().map(|&i| (y[i as usize] - m).powi(2)).sum()
        };
        let tie_tol = 1e-12 * (1.0 + sst);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = idx.to_vec();
        for &j in dims {
            sorted.sort_by(|&a, &b| self.x(a, j).total_cmp(&self.x(b, j)));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += y[sorted[k] as usize];
                let (lo, hi) = (self.x(sorted[k], j), self.x(sorted[k + 1], j));
                if lo == hi {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = (n - k - 1) as f64;
                let diff = left_sum / nl - (total - left_sum) / nr;
                let score = sst - nl * nr / n as f64 * diff * diff;
                let mut thr = 0.5 * (lo + hi);
                if thr >= hi {
                    thr = lo;
                }
                if best.is_none_or(|b| score < b.0 - tie_tol) {
                    best = Some((score, j, thr));
                }
            }
        }
        best
    }

    fn grow<R: Rng>(&mut self, idx: Vec<u32>, rng: &mut R) -> u32 {
        let at = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { leaf: 0 });
        let d = self.data.dim();
        let mut split = None;
        if idx.len() > self.m_s {
            let mut dims: Vec<usize> = sample_indices(rng, d, self.d_tilde).into_vec();
            dims.sort_unstable();
            split = self.best_split(&idx, &dims);
            if split.is_none() && self.d_tilde < d {
                let rest: Vec<usize> = (0..d).filter(|j| !dims.contains(j)).collect();
                split = self.best_split(&idx, &rest);
            }
        }
        match split {
            None => {
                self.nodes[at as usize] = Node::Leaf {
                    leaf: self.leaves.len() as u32,
                };
                self.leaves.push(idx);
            }
            Some((_, dim, threshold)) => {
                let (l, r): (Vec<u32>, Vec<u32>) =
                    idx.into_iter().partition(|&i| self.x(i, dim) <= threshold);
                let left = self.grow(l, rng);
                let right = self.grow(r, rng);
                self.nodes[at as usize] = Node::Split {
                    dim: dim as u32,
                    threshold,
                    left,
                    right,
                };
            }
        }
        at
    }
}

/// Grows `n_trees` trees with maximal leaf size `m_s`.
pub fn forest_fit(
    data: &Dataset,
    tau: QuantileLevel,
    m_s: usize,
    opts: ForestOptions,
) -> Result<ForestModel> {
    if m_s == 0 {
        return Err(Error::invalid("maximal leaf size must be at least 1"));
    }
    if opts.n_trees == 0 {
        return Err(Error::invalid("a forest needs at least one tree"));
    }
    let d = data.dim();
    let d_tilde = opts.d_tilde.unwrap_or(d.div_ceil(3));
    if d_tilde == 0 || d_tilde > d {
        return Err(Error::invalid(format!(
            "split-candidate count must lie in [1, {d}]"
        )));
    }
    let n = data.len();
    let mut trees = Vec::with_capacity(opts.n_trees);
    for t in 0..opts.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(opts.seed, t as u64));
        let idx: Vec<u32> = if opts.bootstrap {
            (0..n).map(|_| rng.random_range(0..n) as u32).collect()
        } else {
            (0..n as u32).collect()
        };
        let mut g = Grower {
            data,
            m_s,
            d_tilde,
            nodes: Vec::new(),
            leaves: Vec::new(),
        };
        g.grow(idx, &mut rng);
        trees.push(Tree {
            nodes: g.nodes,
            leaves: g.leaves,
        });
    }
    let mut y_order: Vec<u32> = (0..n as u32).collect();
    y_order.sort_by(|&a, &b| data.y()[a as usize].total_cmp(&data.y()[b as usize]));
    Ok(ForestModel {
        trees,
        m_s,
        d_tilde,
        tau,
        data: data.clone(),
        y_order,
    })
}

impl ForestModel {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn m_s(&self) -> usize {
        self.m_s
    }

    pub fn d_tilde(&self) -> usize {
        self.d_tilde
    }

    pub fn tau(&self) -> QuantileLevel {
        self.tau
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Averaged leaf weights `w_i(x)` over the training points; they sum to one.
    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.data.len()];
        let per_tree = 1.0 / self.trees.len() as f64;
        for t in &self.trees {
            let members = t.leaf_members(t.leaf_id(x));
            let share = per_tree / members.len() as f64;
            for &i in members {
                w[i as usize] += share;
            }
        }
        w
    }

    /// Weighted empirical conditional CDF `F(y | x)`.
    pub fn conditional_cdf(&self, x: &[f64], y: f64) -> f64 {
        let w = self.weights(x);
        self.data
            .y()
            .iter()
            .zip(&w)
            .filter(|(yi, _)| **yi <= y)
            .map(|(_, wi)| wi)
            .sum()
    }

    /// Smallest training response at which the weighted CDF reaches `tau`.
    pub fn quantile_at(&self, x: &[f64], tau: f64) -> f64 {
        let w = self.weights(x);
        let y = self.data.y();
        let mut cum = 0.0;
        let mut k = 0;
        while k < self.y_order.len() {
            let v = y[self.y_order[k] as usize];
            while k < self.y_order.len() && y[self.y_order[k] as usize] == v {
                cum += w[self.y_order[k] as usize];
                k += 1;
            }
            if cum >= tau - LEVEL_TOL {
                return v;
            }
        }
        y[self.y_order[self.y_order.len() - 1] as usize]
    }

    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.quantile_at(x, self.tau.get())
    }
}
