//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::prelude::*;

/// Jitter levels, as fractions of the mean diagonal, tried after a plain factorisation fails.
const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky factor together with the diagonal jitter that made it succeed.
#[derive(Clone)]
pub(crate) struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Solves `L x = b` with the lower factor.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .unwrap_or_else(|| b.clone())
    }
}

/// Factorises a symmetric matrix, adding escalating diagonal jitter when needed.
pub(crate) fn cholesky_jittered(a: &DMatrix<f64>) -> Result<Factor> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(
            "matrix to factorise has non-finite entries",
        ));
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let n = a.nrows();
    let mean_diag = (a.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE);
    for frac in JITTER_LADDER {
        let jitter = frac * mean_diag;
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
    }
    Err(Error::numerical(format!(
        "matrix of size {n} is not positive definite even with jitter {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1] * mean_diag
    )))
}
