//! Training data containers.

use serde::{Deserialize, Serialize};

use crate::prelude::*;

const DOMAIN_TOL: f64 = 1e-12;

/// Quantile order `tau`, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(QuantileLevel(tau))
        } else {
            Err(Error::invalid(format!(
                "quantile level must lie in (0,1), got {tau}"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    /// The mirrored level `1 - tau`.
    pub fn flipped(self) -> Self {
        QuantileLevel(1.0 - self.0)
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        QuantileLevel::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

/// Row-major `n x d` matrix of input points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("points need at least one coordinate"));
        }
        if data.len() != n * d {
            return Err(Error::invalid(format!(
                "expected {} values for {n}x{d} points, got {}",
                n * d,
                data.len()
            )));
        }
        Ok(Points { n, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::invalid("ragged point rows"));
            }
            data.extend_from_slice(r);
        }
        Points::new(rows.len(), d, data)
    }

    /// One-dimensional points from scalar coordinates.
    pub fn from_scalars(xs: &[f64]) -> Self {
        Points {
            n: xs.len(),
            d: 1,
            data: xs.to_vec(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, idx: &[usize]) -> Points {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Points {
            n: idx.len(),
            d: self.d,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Axis-aligned box: one `(lower, upper)` pair per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain(Vec<(f64, f64)>);

impl Domain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::invalid("domain needs at least one coordinate"));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("bad domain interval [{lo}, {hi}]")));
            }
        }
        Ok(Domain(bounds))
    }

    /// Unit hypercube `[0,1]^d`.
    pub fn unit(d: usize) -> Self {
        Domain(vec![(0.0, 1.0); d])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.0
    }

    pub fn width(&self, j: usize) -> f64 {
        self.0[j].1 - self.0[j].0
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.0.len()
            && x.iter().zip(&self.0).all(|(&v, &(lo, hi))| {
                let tol = DOMAIN_TOL * (1.0 + hi.abs().max(lo.abs()));
                v >= lo - tol && v <= hi + tol
            })
    }

    /// Map a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.0)
            .map(|(&t, &(lo, hi))| lo + t * (hi - lo))
            .collect()
    }

    /// Smallest box containing every point.
    pub fn bounding(points: &Points) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot bound an empty point set"));
        }
        let mut b: Vec<(f64, f64)> = points.row(0).iter().map(|&v| (v, v)).collect();
        for r in points.rows() {
            for (bj, &v) in b.iter_mut().zip(r) {
                bj.0 = bj.0.min(v);
                bj.1 = bj.1.max(v);
            }
        }
        for bj in &mut b {
            if bj.1 <= bj.0 {
                let pad = 0.5 * (1.0 + bj.0.abs());
                bj.0 -= pad;
                bj.1 += pad;
            }
        }
        Ok(Domain(b))
    }
}

/// `n` design points with one scalar response each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Points,
    y: Vec<f64>,
    domain: Domain,
}

impl Dataset {
    /// Checks `n >= 1`, matching lengths, finiteness and that every row is in the box.
    ///
    /// Duplicate rows are allowed (bootstrap resamples need them); use
    /// [`Dataset::has_distinct_rows`] where a design must be repetition-free.
    pub fn new(x: Points, y: Vec<f64>, domain: Domain) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("dataset must contain at least one point"));
        }
        if x.len() != y.len() {
            return Err(Error::invalid(format!(
                "{} points but {} responses",
                x.len(),
                y.len()
            )));
        }
        if x.dim() != domain.dim() {
            return Err(Error::invalid("point dimension does not match the domain"));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        if let Some(i) = (0..x.len()).find(|&i| !domain.contains(x.row(i))) {
            return Err(Error::invalid(format!("row {i} lies outside the domain")));
        }
        Ok(Dataset { x, y, domain })
    }

    pub fn x(&self) -> &Points {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Dataset::new(self.x.select(idx), y, self.domain.clone())
    }

    /// Same inputs, responses shifted by `c`.
    pub fn shifted(&self, c: f64) -> Dataset {
        Dataset {
            x: self.x.clone(),
            y: self.y.iter().map(|v| v + c).collect(),
            domain: self.domain.clone(),
        }
    }

    pub fn has_distinct_rows(&self) -> bool {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| lex_cmp(self.x.row(a), self.x.row(b)));
        idx.windows(2).all(|w| self.x.row(w[0]) != self.x.row(w[1]))
    }
}

pub(crate) fn lex_cmp(a: &[f64], b: &[f64]) -> core::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            core::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    core::cmp::Ordering::Equal
}

/// Stratified design: `n'` distinct base points, each observed `r` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicatedDataset {
    bases: Points,
    replicates: Vec<Vec<f64>>,
    domain: Domain,
}

impl ReplicatedDataset {
    pub fn new(bases: Points, replicates: Vec<Vec<f64>>, domain: Domain) -> Result<Self> {
        if bases.len() != replicates.len() {
            return Err(Error::invalid(
                "one replicate vector per base point required",
            ));
        }
        let r = replicates.first().map(Vec::len).unwrap_or(0);
        if r < 2 {
            return Err(Error::invalid("replicated designs need r >= 2"));
        }
        if replicates.iter().any(|v| v.len() != r) {
            return Err(Error::invalid(
                "every base point needs the same number of replicates",
            ));
        }
        let flat = Dataset::new(bases.clone(), vec![0.0; bases.len()], domain.clone())?;
        if !flat.has_distinct_rows() {
            return Err(Error::invalid("replicated-design bases must be distinct"));
        }
        if replicates.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("replicates contain non-finite values"));
        }
        Ok(ReplicatedDataset {
            bases,
            replicates,
            domain,
        })
    }

    pub fn bases(&self) -> &Points {
        &self.bases
    }

    pub fn replicates(&self) -> &[Vec<f64>] {
        &self.replicates
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn n_bases(&self) -> usize {
        self.bases.len()
    }

    pub fn n_replicates(&self) -> usize {
        self.replicates[0].len()
    }

    /// Flatten into `n' * r` rows, base-major.
    pub fn to_dataset(&self) -> Dataset {
        let r = self.n_replicates();
        let mut x = Vec::with_capacity(self.bases.len() * r * self.bases.dim());
        let mut y = Vec::with_capacity(self.bases.len() * r);
        for (base, reps) in self.bases.rows().zip(&self.replicates) {
            for &v in reps {
                x.extend_from_slice(base);
                y.push(v);
            }
        }
        let n = y.len();
        Dataset {
            x: Points {
                n,
                d: self.bases.dim(),
                data: x,
            },
            y,
            domain: self.domain.clone(),
        }
    }
}
