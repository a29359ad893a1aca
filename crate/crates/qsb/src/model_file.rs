//! Versioned JSON envelope for fitted models.

use std::path::Path;

use qsb_core::model::{FittedModel, MethodSettings};
use qsb_core::QuantileModel;
use serde::{Deserialize, Serialize};

use crate::error::{QsbError, Result};
use crate::io::write_atomic;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub tau: f64,
    /// Tuned hyperparameters with their names; empty for likelihood-fitted models.
    pub hyper: Vec<f64>,
    pub hyper_names: Vec<String>,
    pub settings: MethodSettings,
    pub model: FittedModel,
}

impl ModelFile {
    pub fn new(
        model: FittedModel,
        hyper: Vec<f64>,
        hyper_names: Vec<String>,
        settings: MethodSettings,
    ) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            tau: model.tau().get(),
            hyper,
            hyper_names,
            settings,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        match v.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(n) if n == u64::from(SCHEMA_VERSION) => Ok(serde_json::from_value(v)?),
            Some(n) => Err(QsbError::format(format!(
                "model schema version {n} is not supported (expected {SCHEMA_VERSION})"
            ))),
            None => Err(QsbError::format("model file has no schema_version")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| QsbError::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qsb_core::gp::Matern52;
    use qsb_core::model::ConstantModel;
    use qsb_core::qk::{qk_fit, NoiseMode, QkOptions};
    use qsb_core::{Domain, Points, QuantileLevel, ReplicatedDataset};

    #[test]
    fn round_trip_and_version_check() {
        let tau = QuantileLevel::new(0.3).unwrap();
        let f = ModelFile::new(
            FittedModel::Constant(ConstantModel { value: 1.5, tau }),
            vec![],
            vec![],
            MethodSettings::default(),
        );
        let back = ModelFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back.model.predict_one(&[0.0]), 1.5);
        assert_eq!(back.tau, 0.3);
        let bumped = f
            .to_json()
            .unwrap()
            .replace("\"schema_version\":1", "\"schema_version\":99");
        assert!(ModelFile::from_json(&bumped).is_err());
    }

    #[test]
    fn gaussian_process_models_survive_serialisation() {
        let data = ReplicatedDataset::new(
            Points::from_scalars(&[0.0, 0.4, 1.0]),
            vec![
                vec![1.0, 2.0, 3.0],
                vec![0.0, 1.0, 1.5],
                vec![2.0, 2.5, 4.0],
            ],
            Domain::unit(1),
        )
        .unwrap();
        let tau = QuantileLevel::new(0.5).unwrap();
        let qk = qk_fit(
            &data,
            tau,
            &QkOptions {
                noise: NoiseMode::Zero,
                n_start: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        let model = FittedModel::Qk(
            qk.with_kernel(Matern52::new(1.0, vec![0.3]).unwrap())
                .unwrap(),
        );
        let f = ModelFile::new(model.clone(), vec![], vec![], MethodSettings::default());
        let back = ModelFile::from_json(&f.to_json().unwrap()).unwrap();
        for x in [0.0, 0.2, 0.77] {
            assert_eq!(back.model.predictive(&[x]), model.predictive(&[x]));
        }
    }
}
