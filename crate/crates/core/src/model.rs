//! Common interface over the metamodels, method identifiers, default
//! hyperparameter boxes and fitting from a tuned hyperparameter vector.

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Points, QuantileLevel, ReplicatedDataset};
use crate::forest::{forest_fit, ForestModel, ForestOptions};
use crate::knn::{knn_fit, KnnModel};
use crate::metrics::empirical_quantile;
use crate::nn::{nn_train, NnModel, NnOptions};
use crate::prelude::*;
use crate::qk::{qk_fit, QkModel, QkOptions};
use crate::rkhs::{rkhs_fit, rkhs_kernel, QpOptions, RkhsModel};
use crate::tuning::{HyperBox, HyperDim};
use crate::vb::{vb_fit, VbModel, VbOptions};

/// A fitted conditional-quantile estimator.
pub trait QuantileModel {
    fn tau(&self) -> QuantileLevel;

    fn predict_one(&self, x: &[f64]) -> f64;

    fn predict(&self, xs: &Points) -> Vec<f64> {
        xs.rows().map(|x| self.predict_one(x)).collect()
    }

    /// Gaussian posterior `(mean, variance)` of the quantile, for Bayesian models.
    fn predictive(&self, _x: &[f64]) -> Option<(f64, f64)> {
        None
    }
}

/// The six metamodels, in the order used to break rank ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodId {
    KN,
    RF,
    NN,
    RK,
    QK,
    VB,
}

impl MethodId {
    pub const ALL: [MethodId; 6] = [
        MethodId::KN,
        MethodId::RF,
        MethodId::NN,
        MethodId::RK,
        MethodId::QK,
        MethodId::VB,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::KN => "KN",
            MethodId::RF => "RF",
            MethodId::NN => "NN",
            MethodId::RK => "RK",
            MethodId::QK => "QK",
            MethodId::VB => "VB",
        }
    }

    /// Whether hyperparameters are chosen by cross-validation (rather than likelihood).
    pub fn is_cv_tuned(self) -> bool {
        matches!(
            self,
            MethodId::KN | MethodId::RF | MethodId::NN | MethodId::RK
        )
    }

    /// Whether the method trains on a replicated design.
    pub fn needs_replicates(self) -> bool {
        self == MethodId::QK
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown method {s:?}; expected one of KN, RF, NN, RK, QK, VB"
                ))
            })
    }
}

/// The unconditional empirical quantile of the training responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantModel {
    pub value: f64,
    pub tau: QuantileLevel,
}

impl ConstantModel {
    pub fn fit(data: &Dataset, tau: QuantileLevel) -> Result<Self> {
        Ok(ConstantModel {
            value: empirical_quantile(data.y(), tau)?,
            tau,
        })
    }
}

impl QuantileModel for ConstantModel {
    fn tau(&self) -> QuantileLevel {
        self.tau
    }

    fn predict_one(&self, _x: &[f64]) -> f64 {
        self.value
    }
}

impl QuantileModel for KnnModel {
    fn tau(&self) -> QuantileLevel {
        KnnModel::tau(self)
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        KnnModel::predict_one(self, x)
    }
}

impl QuantileModel for ForestModel {
    fn tau(&self) -> QuantileLevel {
        ForestModel::tau(self)
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        ForestModel::predict_one(self, x)
    }
}

impl QuantileModel for NnModel {
    fn tau(&self) -> QuantileLevel {
        self.tau
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        NnModel::predict_one(self, x)
    }
}

impl QuantileModel for RkhsModel {
    fn tau(&self) -> QuantileLevel {
        RkhsModel::tau(self)
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        RkhsModel::predict_one(self, x)
    }
}

impl QuantileModel for QkModel {
    fn tau(&self) -> QuantileLevel {
        self.tau
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        QkModel::predict_one(self, x).0
    }

    fn predictive(&self, x: &[f64]) -> Option<(f64, f64)> {
        Some(QkModel::predict_one(self, x))
    }
}

impl QuantileModel for VbModel {
    fn tau(&self) -> QuantileLevel {
        self.tau
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        VbModel::predict_one(self, x).0
    }

    fn predictive(&self, x: &[f64]) -> Option<(f64, f64)> {
        Some(VbModel::predict_one(self, x))
    }
}

/// Any fitted model, serialisable with its kind as a tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model")]
pub enum FittedModel {
    Constant(ConstantModel),
    Knn(KnnModel),
    Forest(ForestModel),
    Nn(NnModel),
    Rkhs(RkhsModel),
    Qk(QkModel),
    Vb(VbModel),
}

impl FittedModel {
    /// The method of the model; `None` for the constant reference.
    pub fn method(&self) -> Option<MethodId> {
        match self {
            FittedModel::Constant(_) => None,
            FittedModel::Knn(_) => Some(MethodId::KN),
            FittedModel::Forest(_) => Some(MethodId::RF),
            FittedModel::Nn(_) => Some(MethodId::NN),
            FittedModel::Rkhs(_) => Some(MethodId::RK),
            FittedModel::Qk(_) => Some(MethodId::QK),
            FittedModel::Vb(_) => Some(MethodId::VB),
        }
    }

    fn inner(&self) -> &dyn QuantileModel {
        match self {
            FittedModel::Constant(m) => m,
            FittedModel::Knn(m) => m,
            FittedModel::Forest(m) => m,
            FittedModel::Nn(m) => m,
            FittedModel::Rkhs(m) => m,
            FittedModel::Qk(m) => m,
            FittedModel::Vb(m) => m,
        }
    }

    /// Input dimension the model expects.
    pub fn dim(&self) -> Option<usize> {
        match self {
            FittedModel::Constant(_) => None,
            FittedModel::Knn(m) => Some(m.data().dim()),
            FittedModel::Forest(m) => Some(m.data().dim()),
            FittedModel::Nn(m) => Some(m.net.input_dim()),
            FittedModel::Rkhs(m) => Some(m.kernel().dim()),
            FittedModel::Qk(m) => Some(m.gp.kernel().dim()),
            FittedModel::Vb(m) => Some(m.inputs().dim()),
        }
    }

    /// The K-nearest-neighbour model, when this is one.
    pub fn as_knn(&self) -> Option<&KnnModel> {
        match self {
            FittedModel::Knn(m) => Some(m),
            _ => None,
        }
    }
}

impl QuantileModel for FittedModel {
    fn tau(&self) -> QuantileLevel {
        self.inner().tau()
    }

    fn predict_one(&self, x: &[f64]) -> f64 {
        self.inner().predict_one(x)
    }

    fn predict(&self, xs: &Points) -> Vec<f64> {
        self.inner().predict(xs)
    }

    fn predictive(&self, x: &[f64]) -> Option<(f64, f64)> {
        self.inner().predictive(x)
    }
}

/// Settings that are not tuned: forest size, optimiser budgets, seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MethodSettings {
    pub forest: ForestOptions,
    pub nn: NnOptions,
    pub qp: QpOptions,
    pub qk: QkOptions,
    pub vb: VbOptions,
}

impl MethodSettings {
    /// Copy with every internal seed replaced by streams derived from `seed`.
    pub fn reseeded(&self, seed: u64) -> MethodSettings {
        let mut s = self.clone();
        s.forest.seed = crate::derive_seed(seed, 11);
        s.nn.seed = crate::derive_seed(seed, 12);
        s.qk.seed = crate::derive_seed(seed, 13);
        s.vb.seed = crate::derive_seed(seed, 14);
        s.vb.m_step.seed = crate::derive_seed(seed, 15);
        s
    }
}

/// Coordinate ranges of the training inputs, falling back to the domain width.
pub fn input_ranges(data: &Dataset) -> Vec<f64> {
    (0..data.dim())
        .map(|j| {
            let (lo, hi) = data
                .x()
                .rows()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| {
                    (l.min(r[j]), h.max(r[j]))
                });
            if hi > lo {
                hi - lo
            } else {
                data.domain().width(j)
            }
        })
        .collect()
}

/// Default tuning box of a cross-validated method for a training set of size `n`.
pub fn default_box(method: MethodId, data: &Dataset) -> Result<HyperBox> {
    let n = data.len() as f64;
    match method {
        MethodId::KN => HyperBox::new(vec![HyperDim::integer("K", 1.0, n)]),
        MethodId::RF => HyperBox::new(vec![HyperDim::integer("m_s", 1.0, n)]),
        MethodId::NN => HyperBox::new(vec![
            HyperDim::log("lambda", 1e-6, 1.0),
            HyperDim::integer("J1", 1.0, 20.0),
        ]),
        MethodId::RK => {
            let mut dims = vec![HyperDim::log("lambda", 1e-6, 10.0)];
            for (j, r) in input_ranges(data).into_iter().enumerate() {
                dims.push(HyperDim::log(
                    &format!("theta{}", j + 1),
                    1e-2 * r,
                    10.0 * r,
                ));
            }
            HyperBox::new(dims)
        }
        MethodId::QK | MethodId::VB => Err(Error::Unsupported(format!(
            "{method} is fitted by likelihood, not tuned on a box"
        ))),
    }
}

/// Default SOO budget of a cross-validated method.
pub fn default_budget(method: MethodId, d: usize) -> usize {
    if method == MethodId::RK {
        50 * (d + 1)
    } else {
        100
    }
}

/// Fits a cross-validated method at hyperparameters `hyper` (box coordinates).
///
/// Integer hyperparameters larger than the training set are clipped to it,
/// which happens inside cross-validation folds.
pub fn fit_with_hyper(
    method: MethodId,
    data: &Dataset,
    tau: QuantileLevel,
    hyper: &[f64],
    settings: &MethodSettings,
) -> Result<FittedModel> {
    let n = data.len();
    let count = |v: f64| (v.round().max(1.0) as usize).min(n);
    let need = |k: usize| {
        if hyper.len() == k {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{method} expects {k} hyperparameters, got {}",
                hyper.len()
            )))
        }
    };
    match method {
        MethodId::KN => {
            need(1)?;
            Ok(FittedModel::Knn(knn_fit(data, tau, count(hyper[0]))?))
        }
        MethodId::RF => {
            need(1)?;
            Ok(FittedModel::Forest(forest_fit(
                data,
                tau,
                count(hyper[0]),
                settings.forest,
            )?))
        }
        MethodId::NN => {
            need(2)?;
            let hidden = hyper[1].round().max(1.0) as usize;
            Ok(FittedModel::Nn(nn_train(
                data,
                tau,
                hyper[0],
                hidden,
                &settings.nn,
            )?))
        }
        MethodId::RK => {
            need(1 + data.dim())?;
            let kernel = rkhs_kernel(hyper[1..].to_vec())?;
            Ok(FittedModel::Rkhs(rkhs_fit(
                data,
                tau,
                hyper[0],
                &kernel,
                settings.qp,
            )?))
        }
        MethodId::VB => Ok(FittedModel::Vb(vb_fit(data, tau, &settings.vb)?)),
        MethodId::QK => Err(Error::Unsupported(
            "QK trains on a replicated design".into(),
        )),
    }
}

/// Fits quantile kriging on a replicated design.
pub fn fit_replicated(
    data: &ReplicatedDataset,
    tau: QuantileLevel,
    settings: &MethodSettings,
) -> Result<FittedModel> {
    Ok(FittedModel::Qk(qk_fit(data, tau, &settings.qk)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use crate::metrics::rank_methods;
    use alloc::collections::BTreeMap;

    fn lvl(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn data() -> Dataset {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
        let y = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (5.0 * x).sin() + 0.1 * ((i * 7) % 5) as f64)
            .collect();
        Dataset::new(Points::from_scalars(&xs), y, Domain::unit(1)).unwrap()
    }

    #[test]
    fn method_ids_parse_and_order() {
        for m in MethodId::ALL {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
        }
        assert_eq!("rk".parse::<MethodId>().unwrap(), MethodId::RK);
        assert!("XX".parse::<MethodId>().is_err());
        let errors: BTreeMap<MethodId, f64> = MethodId::ALL.iter().map(|m| (*m, 1.0)).collect();
        let ranks = rank_methods(&errors).unwrap();
        assert_eq!(ranks[&MethodId::KN], 1);
        assert_eq!(ranks[&MethodId::VB], 6);
    }

    #[test]
    fn constant_model_is_the_empirical_quantile() {
        let d = data();
        let m = ConstantModel::fit(&d, lvl(0.5)).unwrap();
        assert_eq!(
            m.predict_one(&[0.3]),
            empirical_quantile(d.y(), lvl(0.5)).unwrap()
        );
    }

    #[test]
    fn hyper_fits_dispatch() {
        let d = data();
        let tau = lvl(0.5);
        let settings = MethodSettings {
            forest: ForestOptions {
                n_trees: 20,
                ..Default::default()
            },
            nn: NnOptions {
                n_multistart: 1,
                schedule: vec![0.5, 0.0625],
                max_iter: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        let cases = [
            (MethodId::KN, vec![5.0]),
            (MethodId::RF, vec![3.0]),
            (MethodId::NN, vec![1e-3, 3.0]),
            (MethodId::RK, vec![1e-2, 0.2]),
        ];
        for (m, h) in cases {
            let b = default_box(m, &d).unwrap();
            assert!(b.contains(&h), "{m}");
            let f = fit_with_hyper(m, &d, tau, &h, &settings).unwrap();
            assert_eq!(f.method(), Some(m));
            assert_eq!(f.dim(), Some(1));
            assert!(f.predict(d.x()).iter().all(|v| v.is_finite()));
            assert!(f.predictive(&[0.5]).is_none());
        }
        assert!(fit_with_hyper(MethodId::KN, &d, tau, &[1000.0], &settings).is_ok());
        assert!(fit_with_hyper(MethodId::KN, &d, tau, &[1.0, 2.0], &settings).is_err());
        assert!(default_box(MethodId::QK, &d).is_err());
        assert_eq!(default_budget(MethodId::RK, 2), 150);
    }
}
