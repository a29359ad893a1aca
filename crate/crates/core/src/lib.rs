//! Conditional quantile metamodels for stochastic black-box simulators.
//!
//! Six estimators of `q_tau(x)`, the tau-quantile of a noisy response `Y_x`:
//!
//! * order-statistic methods: [`knn`] (K nearest neighbours) and [`forest`]
//!   (quantile random forest with a weighted empirical CDF);
//! * functional methods: [`nn`] (one-hidden-layer network trained on an
//!   annealed smoothed pinball loss) and [`rkhs`] (kernel quantile regression
//!   solved as a box-constrained QP);
//! * Bayesian methods: [`qk`] (quantile kriging on replicated designs) and
//!   [`vb`] (variational EM with an asymmetric-Laplace likelihood).
//!
//! Around them sit the analytic test problems ([`problems`]), experimental
//! designs ([`designs`]), hyperparameter tuning ([`tuning`]), confidence
//! intervals ([`ci`]) and the shared loss/metric helpers in [`metrics`].
//!
//! The crate is `no_std` and only needs `alloc`. All randomness goes through
//! caller-supplied [`rand::Rng`] handles or explicit `u64` seeds.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ci;
pub mod data;
pub mod designs;
pub mod error;
pub mod forest;
pub mod gp;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod problems;
pub mod qk;
pub mod rkhs;
pub mod special;
pub mod tuning;
pub mod vb;

mod linalg;
mod prelude;
#[cfg(test)]
mod quad;

pub use data::{Dataset, Domain, Points, QuantileLevel, ReplicatedDataset};
pub use error::{Error, Result};
pub use model::{FittedModel, MethodId, QuantileModel};

/// Deterministic seed derivation (splitmix64 finalizer over a seed and a stream id).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
