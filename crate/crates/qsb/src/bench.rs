//! Benchmark harness: one cell is a (problem, size level, quantile level,
//! replicate) combination in which every configured method is tuned, fitted
//! and scored against the true quantiles on a test grid.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use qsb_core::designs::{
    lhs_points, replicated_design, sample_dataset, space_filling, standard_sizes, MaximinOptions,
    Sample,
};
use qsb_core::metrics::{e_cq_from_l2, e_l2, rank_methods};
use qsb_core::model::{
    default_box, fit_replicated, fit_with_hyper, ConstantModel, FittedModel, MethodId,
    MethodSettings,
};
use qsb_core::problems::{make_test_case, TestProblem};
use qsb_core::qk::QkModel;
use qsb_core::tuning::{cv_pinball, oracle_tune, soo_minimize, HyperBox};
use qsb_core::vb::vb_fit_until;
use qsb_core::{derive_seed, Dataset, Points, QuantileLevel, QuantileModel, ReplicatedDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::BenchConfig;
use crate::error::{QsbError, Result};
use crate::io::write_atomic;

/// Label of the constant-quantile reference row.
pub const CONSTANT_LABEL: &str = "CQ";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub problem: u8,
    pub size_level: u8,
    pub tau: f64,
    pub replicate: u32,
}

/// One scored (cell, method) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub problem: u8,
    pub size_level: u8,
    pub dim: usize,
    /// Number of training rows the method saw.
    pub n: usize,
    pub tau: f64,
    pub replicate: u32,
    /// Seed of the sampled training data.
    pub seed: u64,
    pub method: String,
    pub e_l2: Option<f64>,
    pub e_cq: Option<f64>,
    /// Rank among the methods of the cell; failures rank last.
    pub rank: Option<usize>,
    pub oracle_e_l2: Option<f64>,
    pub oracle_e_cq: Option<f64>,
    /// `E_cq(cv) - E_cq(oracle)`.
    pub delta_e: Option<f64>,
    pub hyper: Vec<f64>,
    pub hyper_names: Vec<String>,
    pub wall_time_s: f64,
    /// The wall-clock budget stopped tuning early.
    pub capped: bool,
    pub snr_class: String,
    pub pdf_class: String,
    pub error: Option<String>,
}

/// One tuning evaluation, for the persisted trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub point: Vec<f64>,
    pub score: f64,
    /// Seconds since the start of the method's tuning.
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub key: CellKey,
    pub results: Vec<BenchResult>,
    pub traces: BTreeMap<String, Vec<TraceEntry>>,
}

/// Test grid: equally spaced in 1d, a seeded Latin hypercube otherwise.
pub fn truth_grid(problem: &TestProblem, n_test: Option<usize>, seed: u64) -> Result<Points> {
    let domain = problem.domain();
    if problem.dim() == 1 {
        let n = n_test.unwrap_or(250).max(2);
        let (lo, hi) = domain.bounds()[0];
        let xs: Vec<f64> = (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect();
        Ok(Points::from_scalars(&xs))
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::from(problem.id())));
        Ok(lhs_points(n_test.unwrap_or(4000), domain, &mut rng))
    }
}

pub fn true_quantiles(
    problem: &TestProblem,
    grid: &Points,
    tau: QuantileLevel,
) -> Result<Vec<f64>> {
    Ok(grid
        .rows()
        .map(|x| problem.true_quantile(x, tau))
        .collect::<qsb_core::Result<Vec<_>>>()?)
}

/// Seed of the training data of a cell; shared by every quantile level.
pub fn data_seed(cfg_seed: u64, key: &CellKey) -> u64 {
    derive_seed(
        derive_seed(
            derive_seed(cfg_seed, u64::from(key.problem)),
            u64::from(key.size_level),
        ),
        u64::from(key.replicate),
    )
}

fn method_seed(data_seed: u64, tau: f64, method: MethodId) -> u64 {
    derive_seed(
        derive_seed(data_seed, (tau * 1e9).round() as u64),
        100 + method as u64,
    )
}

/// Outcome of cross-validated tuning.
#[derive(Debug, Clone)]
pub struct CvTuning {
    pub best_point: Vec<f64>,
    pub best_score: f64,
    pub trace: Vec<TraceEntry>,
    pub capped: bool,
}

/// Search settings of [`tune_cv`].
#[derive(Debug, Clone, Copy)]
pub struct CvSearch {
    pub budget: usize,
    pub folds: usize,
    pub fold_seed: u64,
    /// Once passed, remaining evaluations score `+inf` without fitting.
    pub deadline: Option<Instant>,
}

/// Tunes a cross-validated method by SOO on the k-fold pinball score.
pub fn tune_cv(
    method: MethodId,
    data: &Dataset,
    tau: QuantileLevel,
    settings: &MethodSettings,
    bx: &HyperBox,
    search: CvSearch,
) -> Result<CvTuning> {
    let CvSearch {
        budget,
        folds,
        fold_seed,
        deadline,
    } = search;
    let start = Instant::now();
    let mut trace = Vec::new();
    let mut capped = false;
    let objective = |h: &[f64]| {
        let score = if deadline.is_some_and(|d| Instant::now() >= d) {
            capped = true;
            f64::INFINITY
        } else {
            let factory = |hh: &[f64], train: &Dataset, test_x: &Points| {
                Ok(fit_with_hyper(method, train, tau, hh, settings)?.predict(test_x))
            };
            cv_pinball(factory, h, data, tau, folds, fold_seed).unwrap_or(f64::INFINITY)
        };
        trace.push(TraceEntry {
            point: h.to_vec(),
            score,
            elapsed_s: start.elapsed().as_secs_f64(),
        });
        score
    };
    let res = soo_minimize(objective, bx, budget)?;
    if !res.best_score.is_finite() {
        return Err(QsbError::Core(qsb_core::Error::Numerical(format!(
            "no finite cross-validation score for {method}"
        ))));
    }
    Ok(CvTuning {
        best_point: res.best_point,
        best_score: res.best_score,
        trace,
        capped,
    })
}

struct MethodOutcome {
    n: usize,
    e_l2: f64,
    oracle_e_l2: Option<f64>,
    hyper: Vec<f64>,
    hyper_names: Vec<String>,
    capped: bool,
    trace: Vec<TraceEntry>,
}

struct CellContext<'a> {
    cfg: &'a BenchConfig,
    tau: QuantileLevel,
    data: &'a Dataset,
    replicated: Option<&'a ReplicatedDataset>,
    grid: &'a Points,
    truth: &'a [f64],
    data_seed: u64,
}

impl CellContext<'_> {
    fn score(&self, model: &FittedModel) -> f64 {
        e_l2(&model.predict(self.grid), self.truth).unwrap_or(f64::INFINITY)
    }

    fn run_method(&self, method: MethodId) -> Result<MethodOutcome> {
        let seed = method_seed(self.data_seed, self.tau.get(), method);
        let settings = self.cfg.settings.reseeded(seed);
        let deadline = Instant::now() + Duration::from_secs_f64(self.cfg.cell_time_limit_secs);
        match method {
            MethodId::KN | MethodId::RF | MethodId::NN | MethodId::RK => {
                self.run_cv(method, &settings, seed, deadline)
            }
            MethodId::QK => {
                let rd = self
                    .replicated
                    .ok_or_else(|| QsbError::format("QK needs a replicated design"))?;
                let FittedModel::Qk(qk) = fit_replicated(rd, self.tau, &settings)? else {
                    unreachable!()
                };
                self.finish_qk(qk, rd.n_bases() * rd.n_replicates())
            }
            MethodId::VB => {
                let (vb, stopped) = vb_fit_until(self.data, self.tau, &settings.vb, || {
                    Instant::now() >= deadline
                })?;
                let k = &vb.state.kernel;
                let hyper: Vec<f64> = std::iter::once(k.variance)
                    .chain(k.lengthscales.iter().copied())
                    .collect();
                let e = self.score(&FittedModel::Vb(vb.clone()));
                Ok(MethodOutcome {
                    n: self.data.len(),
                    e_l2: e,
                    oracle_e_l2: self.cfg.oracle.then_some(e),
                    hyper_names: kernel_names(hyper.len() - 1),
                    hyper,
                    capped: stopped,
                    trace: Vec::new(),
                })
            }
        }
    }

    fn finish_qk(&self, qk: QkModel, n: usize) -> Result<MethodOutcome> {
        let e = self.score(&FittedModel::Qk(qk.clone()));
        let oracle = if self.cfg.oracle {
            let mut best = e;
            for (_, k) in &qk.candidates {
                if let Ok(m) = qk.with_kernel(k.clone()) {
                    best = best.min(self.score(&FittedModel::Qk(m)));
                }
            }
            Some(best)
        } else {
            None
        };
        let k = qk.gp.kernel();
        let hyper: Vec<f64> = std::iter::once(k.variance)
            .chain(k.lengthscales.iter().copied())
            .collect();
        let trace = qk
            .candidates
            .iter()
            .map(|(ll, k)| TraceEntry {
                point: k.log_params(),
                score: -ll,
                elapsed_s: 0.0,
            })
            .collect();
        Ok(MethodOutcome {
            n,
            e_l2: e,
            oracle_e_l2: oracle,
            hyper_names: kernel_names(hyper.len() - 1),
            hyper,
            capped: false,
            trace,
        })
    }

    fn run_cv(
        &self,
        method: MethodId,
        settings: &MethodSettings,
        seed: u64,
        deadline: Instant,
    ) -> Result<MethodOutcome> {
        let bx = default_box(method, self.data)?;
        let budget = self.cfg.budget_for(method, self.data.dim());
        let tuned = tune_cv(
            method,
            self.data,
            self.tau,
            settings,
            &bx,
            CvSearch {
                budget,
                folds: self.cfg.cv_folds,
                fold_seed: derive_seed(seed, 1),
                deadline: Some(deadline),
            },
        )?;
        let mut memo: HashMap<Vec<u64>, f64> = HashMap::new();
        let mut full_l2 = |h: &[f64]| {
            let key: Vec<u64> = h.iter().map(|v| v.to_bits()).collect();
            *memo.entry(key).or_insert_with(|| {
                fit_with_hyper(method, self.data, self.tau, h, settings)
                    .map_or(f64::INFINITY, |m| self.score(&m))
            })
        };
        let e = full_l2(&tuned.best_point);
        if !e.is_finite() {
            return Err(QsbError::Core(qsb_core::Error::Numerical(format!(
                "{method} failed at its tuned hyperparameters"
            ))));
        }
        let oracle = if self.cfg.oracle {
            let shared: Vec<Vec<f64>> = tuned
                .trace
                .iter()
                .filter(|t| t.score.is_finite())
                .map(|t| t.point.clone())
                .collect();
            Some(oracle_tune(&mut full_l2, &bx, &shared, self.cfg.oracle_budget)?.best_score)
        } else {
            None
        };
        Ok(MethodOutcome {
            n: self.data.len(),
            e_l2: e,
            oracle_e_l2: oracle,
            hyper: tuned.best_point,
            hyper_names: bx.dims().iter().map(|d| d.name.clone()).collect(),
            capped: tuned.capped,
            trace: tuned.trace,
        })
    }
}

fn kernel_names(d: usize) -> Vec<String> {
    std::iter::once("rho2".to_string())
        .chain((1..=d).map(|j| format!("theta{j}")))
        .collect()
}

/// Samples, tunes, fits and scores every configured method in one cell.
pub fn run_cell(cfg: &BenchConfig, key: &CellKey) -> Result<CellRecord> {
    let problem = make_test_case(key.problem)?;
    let tau = QuantileLevel::new(key.tau)?;
    let size = standard_sizes(problem.dim())?[usize::from(key.size_level) - 1];
    let seed = data_seed(cfg.seed, key);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let design = space_filling(size.n, problem.domain(), &mut rng, cfg.maximin)?;
    let Sample::Plain(data) = sample_dataset(&problem, &design, &mut rng)? else {
        unreachable!()
    };
    let replicated = if cfg.methods.contains(&MethodId::QK) {
        let mut rrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
        let rdesign = replicated_design(
            size.qk_bases,
            size.qk_reps,
            problem.domain(),
            &mut rrng,
            cfg.maximin,
        )?;
        match sample_dataset(&problem, &rdesign, &mut rrng)? {
            Sample::Replicated(r) => Some(r),
            Sample::Plain(_) => unreachable!(),
        }
    } else {
        None
    };
    let grid = truth_grid(&problem, cfg.n_test, cfg.seed)?;
    let truth = true_quantiles(&problem, &grid, tau)?;
    let constant = FittedModel::Constant(ConstantModel::fit(&data, tau)?);
    let const_l2 = e_l2(&constant.predict(&grid), &truth)?;
    e_cq_from_l2(const_l2, const_l2)?;

    let base = BenchResult {
        problem: key.problem,
        size_level: key.size_level,
        dim: problem.dim(),
        n: data.len(),
        tau: key.tau,
        replicate: key.replicate,
        seed,
        method: CONSTANT_LABEL.into(),
        e_l2: Some(const_l2),
        e_cq: Some(100.0),
        rank: None,
        oracle_e_l2: None,
        oracle_e_cq: None,
        delta_e: None,
        hyper: vec![],
        hyper_names: vec![],
        wall_time_s: 0.0,
        capped: false,
        snr_class: problem.snr_class().into(),
        pdf_class: problem.pdf_class(key.tau).unwrap_or("variable").into(),
        error: None,
    };
    let ctx = CellContext {
        cfg,
        tau,
        data: &data,
        replicated: replicated.as_ref(),
        grid: &grid,
        truth: &truth,
        data_seed: seed,
    };
    let mut results = vec![base.clone()];
    let mut traces = BTreeMap::new();
    let mut errors: BTreeMap<MethodId, f64> = BTreeMap::new();
    for &m in &cfg.methods {
        let t0 = Instant::now();
        let outcome = ctx.run_method(m);
        let wall = t0.elapsed().as_secs_f64();
        let row = match outcome {
            Ok(o) => {
                errors.insert(m, o.e_l2);
                traces.insert(m.to_string(), o.trace);
                let e_cq = e_cq_from_l2(o.e_l2, const_l2)?;
                let oracle_e_cq = o
                    .oracle_e_l2
                    .map(|v| e_cq_from_l2(v, const_l2))
                    .transpose()?;
                BenchResult {
                    n: o.n,
                    method: m.to_string(),
                    e_l2: Some(o.e_l2),
                    e_cq: Some(e_cq),
                    oracle_e_l2: o.oracle_e_l2,
                    oracle_e_cq,
                    delta_e: oracle_e_cq.map(|oc| e_cq - oc),
                    hyper: o.hyper,
                    hyper_names: o.hyper_names,
                    wall_time_s: wall,
                    capped: o.capped,
                    ..base.clone()
                }
            }
            Err(e) => {
                errors.insert(m, f64::INFINITY);
                BenchResult {
                    method: m.to_string(),
                    e_l2: None,
                    e_cq: None,
                    wall_time_s: wall,
                    error: Some(e.to_string()),
                    ..base.clone()
                }
            }
        };
        results.push(row);
    }
    let ranks = rank_methods(&errors)?;
    for r in results.iter_mut().skip(1) {
        let m: MethodId = r.method.parse()?;
        r.rank = ranks.get(&m).copied();
    }
    Ok(CellRecord {
        key: *key,
        results,
        traces,
    })
}

/// Every cell of a configuration, in a fixed order.
pub fn cells(cfg: &BenchConfig) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &problem in &cfg.problems {
        for &size_level in &cfg.sizes {
            for &tau in &cfg.taus {
                for replicate in 0..cfg.replicates {
                    out.push(CellKey {
                        problem,
                        size_level,
                        tau,
                        replicate,
                    });
                }
            }
        }
    }
    out
}

/// Hex digest identifying a cell under the settings that affect its results.
pub fn cell_hash(cfg: &BenchConfig, key: &CellKey) -> String {
    #[derive(Serialize)]
    struct Identity<'a> {
        key: &'a CellKey,
        seed: u64,
        methods: &'a [MethodId],
        cell_time_limit_secs: f64,
        oracle: bool,
        oracle_budget: usize,
        cv_folds: usize,
        soo_budget: Option<usize>,
        method_budgets: &'a BTreeMap<MethodId, usize>,
        n_test: Option<usize>,
        maximin: MaximinOptions,
        settings: &'a MethodSettings,
    }
    let id = Identity {
        key,
        seed: cfg.seed,
        methods: &cfg.methods,
        cell_time_limit_secs: cfg.cell_time_limit_secs,
        oracle: cfg.oracle,
        oracle_budget: cfg.oracle_budget,
        cv_folds: cfg.cv_folds,
        soo_budget: cfg.soo_budget,
        method_budgets: &cfg.method_budgets,
        n_test: cfg.n_test,
        maximin: cfg.maximin,
        settings: &cfg.settings,
    };
    let bytes = serde_json::to_vec(&id).expect("cell identity serialises");
    Sha256::digest(&bytes)
        .iter()
        .take(16)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchSummary {
    pub results: Vec<BenchResult>,
    pub computed: usize,
    pub reused: usize,
}

fn cell_failure(cfg: &BenchConfig, key: &CellKey, err: &QsbError) -> CellRecord {
    let results = cfg
        .methods
        .iter()
        .map(|m| BenchResult {
            problem: key.problem,
            size_level: key.size_level,
            dim: 0,
            n: 0,
            tau: key.tau,
            replicate: key.replicate,
            seed: data_seed(cfg.seed, key),
            method: m.to_string(),
            e_l2: None,
            e_cq: None,
            rank: None,
            oracle_e_l2: None,
            oracle_e_cq: None,
            delta_e: None,
            hyper: vec![],
            hyper_names: vec![],
            wall_time_s: 0.0,
            capped: false,
            snr_class: String::new(),
            pdf_class: String::new(),
            error: Some(err.to_string()),
        })
        .collect();
    CellRecord {
        key: *key,
        results,
        traces: BTreeMap::new(),
    }
}

fn write_traces(dir: &Path, hash: &str, rec: &CellRecord) -> Result<()> {
    for (method, trace) in &rec.traces {
        let mut s = String::new();
        for t in trace {
            s.push_str(&serde_json::to_string(t)?);
            s.push('\n');
        }
        write_atomic(&dir.join(format!("{hash}_{method}.jsonl")), s.as_bytes())?;
    }
    Ok(())
}

/// Runs (or resumes) every cell in a worker pool and writes the results.
///
/// Layout of `out_dir`: `cells/<hash>.json` per finished cell,
/// `traces/<hash>_<method>.jsonl` tuning traces, `results.json` and
/// `results.csv` with every row.
pub fn run_bench(cfg: &BenchConfig, out_dir: &Path) -> Result<BenchSummary> {
    cfg.validate()?;
    let cell_dir = out_dir.join("cells");
    let trace_dir = out_dir.join("traces");
    for d in [&cell_dir, &trace_dir] {
        std::fs::create_dir_all(d).map_err(|e| QsbError::io(d.as_path(), e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| QsbError::Config(e.to_string()))?;
    let keys = cells(cfg);
    let outcomes: Vec<Result<(CellRecord, bool)>> = pool.install(|| {
        keys.par_iter()
            .map(|key| {
                let hash = cell_hash(cfg, key);
                let path: PathBuf = cell_dir.join(format!("{hash}.json"));
                if let Ok(s) = std::fs::read_to_string(&path) {
                    if let Ok(rec) = serde_json::from_str::<CellRecord>(&s) {
                        return Ok((rec, false));
                    }
                }
                let rec = run_cell(cfg, key).unwrap_or_else(|e| cell_failure(cfg, key, &e));
                write_traces(&trace_dir, &hash, &rec)?;
                write_atomic(&path, serde_json::to_string(&rec)?.as_bytes())?;
                Ok((rec, true))
            })
            .collect()
    });
    let mut results = Vec::new();
    let (mut computed, mut reused) = (0, 0);
    for o in outcomes {
        let (rec, fresh) = o?;
        if fresh {
            computed += 1;
        } else {
            reused += 1;
        }
        results.extend(rec.results);
    }
    write_atomic(
        &out_dir.join("results.json"),
        serde_json::to_string_pretty(&results)?.as_bytes(),
    )?;
    write_results_csv(&out_dir.join("results.csv"), &results)?;
    Ok(BenchSummary {
        results,
        computed,
        reused,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Flat CSV of result rows; hyperparameters are `name=value` pairs joined by `;`.
pub fn write_results_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "problem",
        "size_level",
        "dim",
        "n",
        "tau",
        "replicate",
        "seed",
        "method",
        "e_l2",
        "e_cq",
        "rank",
        "oracle_e_l2",
        "oracle_e_cq",
        "delta_e",
        "hyper",
        "wall_time_s",
        "capped",
        "snr_class",
        "pdf_class",
        "error",
    ])?;
    for r in results {
        let hyper: Vec<String> = r
            .hyper_names
            .iter()
            .zip(&r.hyper)
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        w.write_record([
            r.problem.to_string(),
            r.size_level.to_string(),
            r.dim.to_string(),
            r.n.to_string(),
            r.tau.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.method.clone(),
            opt(r.e_l2),
            opt(r.e_cq),
            r.rank.map_or(String::new(), |k| k.to_string()),
            opt(r.oracle_e_l2),
            opt(r.oracle_e_cq),
            opt(r.delta_e),
            hyper.join(";"),
            r.wall_time_s.to_string(),
            r.capped.to_string(),
            r.snr_class.clone(),
            r.pdf_class.clone(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| QsbError::format(e.to_string()))?;
    write_atomic(path, &bytes)
}
