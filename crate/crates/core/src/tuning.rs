//! Hyperparameter selection: pinball cross-validation searched by SOO,
//! multistart likelihood maximisation and oracle tuning against the truth.

use alloc::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Points, QuantileLevel};
use crate::designs::{maximin_lhs_unit, MaximinOptions};
use crate::metrics::pinball;
use crate::optim::{bfgs_minimize, BfgsOptions};
use crate::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Linear,
    Log,
}

/// One tunable hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperDim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
    pub integer: bool,
}

impl HyperDim {
    pub fn linear(name: &str, lower: f64, upper: f64) -> Self {
        HyperDim {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Linear,
            integer: false,
        }
    }

    pub fn log(name: &str, lower: f64, upper: f64) -> Self {
        HyperDim {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Log,
            integer: false,
        }
    }

    pub fn integer(name: &str, lower: f64, upper: f64) -> Self {
        HyperDim {
            name: name.into(),
            lower,
            upper,
            scale: Scale::Linear,
            integer: true,
        }
    }

    fn value_at(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log => (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp(),
        };
        let v = v.clamp(self.lower, self.upper);
        if self.integer {
            v.round().clamp(self.lower.ceil(), self.upper.floor())
        } else {
            v
        }
    }

    fn unit_of(&self, v: f64) -> f64 {
        let u = match self.scale {
            Scale::Linear => (v - self.lower) / (self.upper - self.lower),
            Scale::Log => (v.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln()),
        };
        u.clamp(0.0, 1.0)
    }
}

/// Product of hyperparameter ranges searched by the tuners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperBox {
    dims: Vec<HyperDim>,
}

impl HyperBox {
    pub fn new(dims: Vec<HyperDim>) -> Result<Self> {
        for d in &dims {
            let ok = d.lower.is_finite()
                && d.upper.is_finite()
                && d.lower <= d.upper
                && (d.scale == Scale::Linear || d.lower > 0.0)
                && (!d.integer || d.lower.ceil() <= d.upper.floor());
            if !ok {
                return Err(Error::invalid(format!(
                    "bad range for hyperparameter {}",
                    d.name
                )));
            }
        }
        Ok(HyperBox { dims })
    }

    pub fn dims(&self) -> &[HyperDim] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    /// Maps a unit-cube point to hyperparameter values, rounding integer coordinates.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(u)
            .map(|(d, &v)| d.value_at(v))
            .collect()
    }

    pub fn to_unit(&self, v: &[f64]) -> Vec<f64> {
        self.dims
            .iter()
            .zip(v)
            .map(|(d, &x)| d.unit_of(x))
            .collect()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.dims.len()
            && self
                .dims
                .iter()
                .zip(v)
                .all(|(d, &x)| x >= d.lower && x <= d.upper)
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub point: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best_point: Vec<f64>,
    pub best_score: f64,
    pub log: Vec<Evaluation>,
}

impl TuneResult {
    fn from_log(log: Vec<Evaluation>) -> Result<Self> {
        let best = log
            .iter()
            .min_by(|a, b| a.score.total_cmp(&b.score))
            .ok_or_else(|| Error::invalid("no evaluations were made"))?;
        Ok(TuneResult {
            best_point: best.point.clone(),
            best_score: best.score,
            log: log.clone(),
        })
    }
}

/// Seeded random partition of `0..n` into `k` folds whose sizes differ by at most one.
pub fn cv_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::invalid(format!(
            "cannot split {n} points into {k} folds"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, &p) in perm.iter().enumerate() {
        folds[i % k].push(p);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Mean held-out pinball loss over `k` folds.
///
/// `factory(hyper, train, test_x)` fits on `train` and predicts at `test_x`.
/// A failed or non-finite fold makes the whole score `+inf`.
pub fn cv_pinball<F>(
    factory: F,
    hyper: &[f64],
    data: &Dataset,
    tau: QuantileLevel,
    k: usize,
    fold_seed: u64,
) -> Result<f64>
where
    F: Fn(&[f64], &Dataset, &Points) -> Result<Vec<f64>>,
{
    let folds = cv_folds(data.len(), k, fold_seed)?;
    let mut total = 0.0;
    for fold in &folds {
        let mut in_test = vec![false; data.len()];
        for &i in fold {
            in_test[i] = true;
        }
        let train_idx: Vec<usize> = (0..data.len()).filter(|&i| !in_test[i]).collect();
        let train = data.subset(&train_idx)?;
        let test_x = data.x().select(fold);
        let pred = match factory(hyper, &train, &test_x) {
            Ok(p) if p.len() == fold.len() && p.iter().all(|v| v.is_finite()) => p,
            _ => return Ok(f64::INFINITY),
        };
        let loss: f64 = fold
            .iter()
            .zip(&pred)
            .map(|(&i, q)| pinball(tau.get(), data.y()[i] - q))
            .sum();
        total += loss / fold.len() as f64;
    }
    Ok(total / folds.len() as f64)
}

struct Cell {
    depth: usize,
    center: Vec<f64>,
    width: Vec<f64>,
    value: f64,
    leaf: bool,
}

/// Simultaneous Optimistic Optimisation over the box's unit-cube image.
///
/// Cells are trisected along their widest side (lowest index on ties); the
/// middle child keeps its parent's centre and value. Each sweep visits depths
/// `0..=min(max depth, ceil(sqrt(t)))`, `t` the evaluations so far, and at
/// every depth expands the best leaf unless a shallower expansion in the same
/// sweep already found a smaller value. Points are rounded before evaluation
/// and repeated rounded points reuse their cached score. At most `budget`
/// evaluations are made.
pub fn soo_minimize<F>(mut objective: F, bx: &HyperBox, budget: usize) -> Result<TuneResult>
where
    F: FnMut(&[f64]) -> f64,
{
    if budget < 3 {
        return Err(Error::invalid(
            "SOO needs a budget of at least 3 evaluations",
        ));
    }
    let dim = bx.len();
    let mut log: Vec<Evaluation> = Vec::new();
    let mut cache: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    let mut eval = |u: &[f64], log: &mut Vec<Evaluation>| -> Option<f64> {
        let point = bx.from_unit(u);
        let key: Vec<u64> = point.iter().map(|v| v.to_bits()).collect();
        if let Some(&v) = cache.get(&key) {
            return Some(v);
        }
        if log.len() >= budget {
            return None;
        }
        let raw = objective(&point);
        let score = if raw.is_finite() { raw } else { f64::INFINITY };
        cache.insert(key, score);
        log.push(Evaluation { point, score });
        Some(score)
    };
    let root = vec![0.5; dim];
    let v0 = eval(&root, &mut log).expect("budget allows the root");
    let mut cells = vec![Cell {
        depth: 0,
        center: root,
        width: vec![1.0; dim],
        value: v0,
        leaf: true,
    }];
    let max_sweeps = 50 * budget;
    'outer: for _ in 0..max_sweeps {
        let max_depth = cells
            .iter()
            .filter(|c| c.leaf)
            .map(|c| c.depth)
            .max()
            .unwrap_or(0);
        let h_cap = (log.len() as f64).sqrt().ceil() as usize;
        let mut v_min = f64::INFINITY;
        let mut expanded_any = false;
        for h in 0..=max_depth.min(h_cap) {
            let best = cells
                .iter()
                .enumerate()
                .filter(|(_, c)| c.leaf && c.depth == h)
                .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i);
            let Some(i) = best else { continue };
            if cells[i].value > v_min {
                continue;
            }
            v_min = cells[i].value;
            let axis = (0..dim)
                .max_by(|&a, &b| {
                    cells[i].width[a]
                        .total_cmp(&cells[i].width[b])
                        .then(b.cmp(&a))
                })
                .expect("nonempty box");
            let w = cells[i].width[axis] / 3.0;
            let mut children = Vec::with_capacity(3);
            for off in [-1.0, 0.0, 1.0] {
                let mut c = cells[i].center.clone();
                c[axis] += off * w;
                let mut width = cells[i].width.clone();
                width[axis] = w;
                let value = if off == 0.0 {
                    cells[i].value
                } else {
                    match eval(&c, &mut log) {
                        Some(v) => v,
                        None => break 'outer,
                    }
                };
                children.push(Cell {
                    depth: h + 1,
                    center: c,
                    width,
                    value,
                    leaf: true,
                });
            }
            cells[i].leaf = false;
            cells.extend(children);
            expanded_any = true;
        }
        if !expanded_any || log.len() >= budget {
            break;
        }
    }
    TuneResult::from_log(log)
}

/// Maximises a log-likelihood from maximin-LHS starts with bounded BFGS.
///
/// `loglik(p)` returns the value and gradient at `p`; errors count as
/// `-inf`. The box is `lower..upper` in the optimisation coordinates.
/// `best_score` of the result is the negated log-likelihood; the log holds
/// every start point followed by every terminal point.
pub fn multistart_ml<F>(
    mut loglik: F,
    lower: &[f64],
    upper: &[f64],
    n_start: usize,
    seed: u64,
    opts: &BfgsOptions,
) -> Result<TuneResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dim = lower.len();
    if dim == 0 || upper.len() != dim || lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
        return Err(Error::invalid(
            "multistart box needs lower < upper in every coordinate",
        ));
    }
    let n_start = n_start.max(1);
    let starts: Vec<Vec<f64>> = if n_start == 1 {
        vec![lower
            .iter()
            .zip(upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = maximin_lhs_unit(
            n_start,
            dim,
            &mut rng,
            MaximinOptions {
                n_restarts: 5,
                n_swaps: 200,
            },
        )?;
        unit.rows()
            .map(|u| {
                u.iter()
                    .zip(lower)
                    .zip(upper)
                    .map(|((t, l), h)| l + t * (h - l))
                    .collect()
            })
            .collect()
    };
    let mut neg = |p: &[f64], g: &mut [f64]| match loglik(p) {
        Ok((v, grad)) if v.is_finite() && grad.iter().all(|x| x.is_finite()) => {
            for (gi, x) in g.iter_mut().zip(grad) {
                *gi = -x;
            }
            -v
        }
        _ => f64::INFINITY,
    };
    let mut bopts = opts.clone();
    bopts.bounds = Some((lower.to_vec(), upper.to_vec()));
    let mut log = Vec::with_capacity(2 * starts.len());
    let mut ends = Vec::with_capacity(starts.len());
    for s in &starts {
        let mut g = vec![0.0; dim];
        log.push(Evaluation {
            point: s.clone(),
            score: neg(s, &mut g),
        });
        let r = bfgs_minimize(&mut neg, s, &bopts);
        ends.push(Evaluation {
            point: r.x,
            score: r.f,
        });
    }
    log.extend(ends);
    if log.iter().all(|e| !e.score.is_finite()) {
        return Err(Error::numerical("every likelihood start failed"));
    }
    TuneResult::from_log(log)
}

/// Oracle tuning: minimises the L2 error against the truth.
///
/// The shared candidates (typically the cross-validation trace) are scored
/// first, outside the budget; then SOO spends `budget` further evaluations
/// (none when `budget` is 0). Because the shared candidates include the
/// cross-validated choice, the oracle error never exceeds it.
pub fn oracle_tune<F>(
    mut e_l2: F,
    bx: &HyperBox,
    shared: &[Vec<f64>],
    budget: usize,
) -> Result<TuneResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut log: Vec<Evaluation> = Vec::with_capacity(shared.len() + budget);
    let mut seen: BTreeMap<Vec<u64>, ()> = BTreeMap::new();
    for p in shared {
        let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key, ()).is_some() {
            continue;
        }
        let v = e_l2(p);
        log.push(Evaluation {
            point: p.clone(),
            score: if v.is_finite() { v } else { f64::INFINITY },
        });
    }
    if budget > 0 {
        log.extend(soo_minimize(&mut e_l2, bx, budget)?.log);
    }
    TuneResult::from_log(log)
}
