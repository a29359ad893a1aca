//! Benchmark configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use qsb_core::designs::MaximinOptions;
use qsb_core::model::{default_budget, MethodId, MethodSettings};
use serde::{Deserialize, Serialize};

use crate::error::{QsbError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Test problems, 1 to 4.
    pub problems: Vec<u8>,
    /// Size levels, 1 to 4.
    pub sizes: Vec<u8>,
    pub taus: Vec<f64>,
    pub methods: Vec<MethodId>,
    pub replicates: u32,
    pub seed: u64,
    pub parallelism: usize,
    pub out_dir: Option<PathBuf>,
    /// Wall-clock budget per (cell, method) for tuning, in seconds.
    pub cell_time_limit_secs: f64,
    /// Score oracle tuning on the cross-validation trace.
    pub oracle: bool,
    /// Extra SOO evaluations for oracle tuning beyond the shared trace.
    pub oracle_budget: usize,
    pub cv_folds: usize,
    /// SOO budget override for every cross-validated method.
    pub soo_budget: Option<usize>,
    /// Per-method SOO budgets; these take precedence over `soo_budget`.
    pub method_budgets: BTreeMap<MethodId, usize>,
    /// Truth-grid size override (250 in 1d, 4000 otherwise).
    pub n_test: Option<usize>,
    pub maximin: MaximinOptions,
    pub settings: MethodSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            problems: vec![1, 2, 3, 4],
            sizes: vec![1, 2, 3, 4],
            taus: vec![0.1, 0.5, 0.9],
            methods: MethodId::ALL.to_vec(),
            replicates: 10,
            seed: 0,
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            out_dir: None,
            cell_time_limit_secs: 600.0,
            oracle: true,
            oracle_budget: 0,
            cv_folds: 5,
            soo_budget: None,
            method_budgets: BTreeMap::new(),
            n_test: None,
            maximin: MaximinOptions::default(),
            settings: MethodSettings::default(),
        }
    }
}

impl BenchConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(s).map_err(|e| QsbError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| QsbError::io(path, e))?;
        Self::from_toml(&s)
    }

    /// SOO budget of a cross-validated method in dimension `d`.
    pub fn budget_for(&self, method: MethodId, d: usize) -> usize {
        self.method_budgets
            .get(&method)
            .copied()
            .or(self.soo_budget)
            .unwrap_or_else(|| default_budget(method, d))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QsbError::Config(m));
        if self.problems.is_empty()
            || self.sizes.is_empty()
            || self.taus.is_empty()
            || self.methods.is_empty()
        {
            return bad("problems, sizes, taus and methods must be nonempty".into());
        }
        if let Some(p) = self.problems.iter().find(|p| !(1..=4).contains(*p)) {
            return bad(format!("problem {p} is not one of 1..4"));
        }
        if let Some(s) = self.sizes.iter().find(|s| !(1..=4).contains(*s)) {
            return bad(format!("size level {s} is not one of 1..4"));
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return bad(format!("quantile level {t} is not in (0, 1)"));
        }
        if self.replicates == 0 || self.parallelism == 0 || self.cv_folds < 2 {
            return bad(
                "replicates and parallelism must be positive and cv_folds at least 2".into(),
            );
        }
        if !(self.cell_time_limit_secs > 0.0) {
            return bad("cell_time_limit_secs must be positive".into());
        }
        if self.soo_budget.is_some_and(|b| b < 3) || self.method_budgets.values().any(|&b| b < 3) {
            return bad("soo_budget must be at least 3".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = BenchConfig::from_toml(
            r#"
            problems = [1]
            sizes = [4]
            methods = ["KN", "RK"]
            replicates = 5
            [method_budgets]
            NN = 20
            [settings.forest]
            n_trees = 300
            [settings.vb]
            n_em_starts = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.taus, vec![0.1, 0.5, 0.9]);
        assert_eq!(cfg.methods, vec![MethodId::KN, MethodId::RK]);
        assert_eq!(cfg.settings.forest.n_trees, 300);
        assert_eq!(cfg.settings.vb.n_em_starts, Some(2));
        assert_eq!(cfg.settings.vb.n_it, 50);
        assert_eq!(cfg.cv_folds, 5);
        assert_eq!(cfg.method_budgets[&MethodId::NN], 20);
        assert!(BenchConfig::from_toml("[method_budgets]\nRK = 2").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(BenchConfig::from_toml("taus = [1.5]").is_err());
        assert!(BenchConfig::from_toml("problems = [5]").is_err());
        assert!(BenchConfig::from_toml("methods = []").is_err());
        assert!(BenchConfig::from_toml("unknown_key = 1").is_err());
        assert!(BenchConfig::from_toml("methods = [\"XX\"]").is_err());
    }
}
