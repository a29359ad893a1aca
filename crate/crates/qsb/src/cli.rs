//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use qsb_core::ci::{bayesian_ci, bootstrap_ci, knn_chernoff_ci, Interval};
use qsb_core::designs::{
    replicated_design, sample_dataset, space_filling, standard_sizes, MaximinOptions, Sample,
};
use qsb_core::model::{
    default_box, default_budget, fit_replicated, fit_with_hyper, FittedModel, MethodId,
    MethodSettings,
};
use qsb_core::problems::make_test_case;
use qsb_core::vb::vb_fit;
use qsb_core::{derive_seed, QuantileLevel, QuantileModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{run_bench, tune_cv, CvSearch};
use crate::config::BenchConfig;
use crate::error::{QsbError, Result};
use crate::io::{
    create, open, read_dataset, read_points, write_dataset, write_predictions, write_replicated,
    CsvData,
};
use crate::model_file::ModelFile;
use crate::report::{load_results, write_report, GroupKey};

#[derive(Debug, Parser)]
#[command(
    name = "qsb",
    version,
    about = "Conditional quantile metamodels and their benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect the analytic test problems.
    Problems {
        #[command(subcommand)]
        action: ProblemsAction,
    },
    /// Draw a training set from a test problem and write it as CSV.
    Sample {
        #[arg(long)]
        problem: u8,
        /// Size level 1 to 4.
        #[arg(long, default_value_t = 1)]
        size: u8,
        /// Draw the replicated design used by quantile kriging.
        #[arg(long)]
        replicated: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune and fit one method on a CSV dataset.
    Fit {
        #[arg(long)]
        method: MethodId,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with method settings (the `[settings]` table of a bench config).
        #[arg(long)]
        settings: Option<PathBuf>,
        /// Fixed hyperparameters, skipping cross-validation.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        hyper: Option<Vec<f64>>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Predict quantiles at query points, optionally with intervals.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        ci: Option<CiKind>,
        #[arg(long, default_value_t = 0.9)]
        level: f64,
        /// Training data; required by `--ci bootstrap`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Bootstrap resamples.
        #[arg(long, default_value_t = 100)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run (or resume) a benchmark described by a TOML config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise benchmark results by a grouping.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// One of overall, size, snr, pdf, dim; every grouping when absent.
        #[arg(long)]
        group: Option<GroupKey>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProblemsAction {
    List,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CiKind {
    /// Gaussian posterior interval (QK, VB).
    Bayes,
    /// Chernoff interval from the neighbour sample (KN).
    Chernoff,
    /// Percentile bootstrap with fixed hyperparameters.
    Bootstrap,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Problems {
            action: ProblemsAction::List,
        } => list_problems(),
        Command::Sample {
            problem,
            size,
            replicated,
            seed,
            out,
        } => sample(problem, size, replicated, seed, out),
        Command::Fit {
            method,
            tau,
            data,
            out,
            settings,
            hyper,
            folds,
            budget,
            seed,
        } => fit(FitArgs {
            method,
            tau,
            data,
            out,
            settings,
            hyper,
            folds,
            budget,
            seed,
        }),
        Command::Predict {
            model,
            points,
            ci,
            level,
            data,
            resamples,
            seed,
            out,
        } => predict(PredictArgs {
            model,
            points,
            ci,
            level,
            data,
            resamples,
            seed,
            out,
        }),
        Command::Bench { config, out } => {
            let cfg = BenchConfig::load(&config)?;
            let dir = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| QsbError::Config("no output directory given".into()))?;
            let summary = run_bench(&cfg, &dir)?;
            let failed = summary.results.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} cells computed, {} reused, {} rows ({} failed) in {}",
                summary.computed,
                summary.reused,
                summary.results.len(),
                failed,
                dir.display()
            );
            Ok(())
        }
        Command::Report { input, group } => {
            let results = load_results(&input)?;
            let groups = group.map_or(GroupKey::ALL.to_vec(), |g| vec![g]);
            for g in groups {
                let rows = write_report(&input, &results, g)?;
                println!("report_{g}.csv: {} rows", rows.len());
            }
            Ok(())
        }
    }
}

fn list_problems() -> Result<()> {
    println!("id\tdim\tnoise\tsnr_class\tpdf(0.1/0.5/0.9)\tdomain");
    for id in 1..=4 {
        let p = make_test_case(id)?;
        let pdf: Vec<&str> = [0.1, 0.5, 0.9]
            .iter()
            .map(|&t| p.pdf_class(t).unwrap_or("variable"))
            .collect();
        let dom: Vec<String> = p
            .domain()
            .bounds()
            .iter()
            .map(|(a, b)| format!("[{a}, {b}]"))
            .collect();
        let dom = if dom.iter().all(|s| *s == dom[0]) {
            format!("{}^{}", dom[0], dom.len())
        } else {
            dom.join("x")
        };
        println!(
            "{id}\t{}\t{:?}\t{}\t{}\t{dom}",
            p.dim(),
            p.noise(),
            p.snr_class(),
            pdf.join("/")
        );
    }
    Ok(())
}

fn sample(problem: u8, size: u8, replicated: bool, seed: u64, out: PathBuf) -> Result<()> {
    let p = make_test_case(problem)?;
    if !(1..=4).contains(&size) {
        return Err(QsbError::Config(format!(
            "size level {size} is not one of 1..4"
        )));
    }
    let level = standard_sizes(p.dim())?[usize::from(size) - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = MaximinOptions::default();
    let design = if replicated {
        replicated_design(level.qk_bases, level.qk_reps, p.domain(), &mut rng, opts)?
    } else {
        space_filling(level.n, p.domain(), &mut rng, opts)?
    };
    let f = create(&out)?;
    match sample_dataset(&p, &design, &mut rng)? {
        Sample::Plain(d) => write_dataset(f, &d),
        Sample::Replicated(r) => write_replicated(f, &r),
    }
}

struct FitArgs {
    method: MethodId,
    tau: f64,
    data: PathBuf,
    out: PathBuf,
    settings: Option<PathBuf>,
    hyper: Option<Vec<f64>>,
    folds: usize,
    budget: Option<usize>,
    seed: u64,
}

#[derive(serde::Deserialize)]
struct SettingsFile {
    #[serde(default)]
    settings: MethodSettings,
}

fn fit(a: FitArgs) -> Result<()> {
    let tau = QuantileLevel::new(a.tau)?;
    let settings = match &a.settings {
        Some(path) => {
            let s = std::fs::read_to_string(path).map_err(|e| QsbError::io(path, e))?;
            toml::from_str::<SettingsFile>(&s)
                .map_err(|e| QsbError::Config(e.to_string()))?
                .settings
        }
        None => MethodSettings::default(),
    }
    .reseeded(a.seed);
    let csv = read_dataset(open(&a.data)?)?;
    let file = match a.method {
        MethodId::QK => {
            let CsvData::Replicated(r) = &csv else {
                return Err(QsbError::format(
                    "QK needs replicated data with a rep_id column",
                ));
            };
            let model = fit_replicated(r, tau, &settings)?;
            ModelFile::new(model, vec![], vec![], settings)
        }
        MethodId::VB => ModelFile::new(
            FittedModel::Vb(vb_fit(&csv.flattened(), tau, &settings.vb)?),
            vec![],
            vec![],
            settings,
        ),
        m => {
            let data = csv.flattened();
            let bx = default_box(m, &data)?;
            let names: Vec<String> = bx.dims().iter().map(|d| d.name.clone()).collect();
            let hyper = match a.hyper {
                Some(h) => h,
                None => {
                    let budget = a.budget.unwrap_or_else(|| default_budget(m, data.dim()));
                    let tuned = tune_cv(
                        m,
                        &data,
                        tau,
                        &settings,
                        &bx,
                        CvSearch {
                            budget,
                            folds: a.folds,
                            fold_seed: derive_seed(a.seed, 1),
                            deadline: None,
                        },
                    )?;
                    eprintln!(
                        "cross-validated pinball loss {:.6} after {} evaluations",
                        tuned.best_score,
                        tuned.trace.len()
                    );
                    tuned.best_point
                }
            };
            if hyper.len() != names.len() {
                return Err(QsbError::Config(format!(
                    "{m} takes {} hyperparameters ({})",
                    names.len(),
                    names.join(", ")
                )));
            }
            let model = fit_with_hyper(m, &data, tau, &hyper, &settings)?;
            ModelFile::new(model, hyper, names, settings)
        }
    };
    file.save(&a.out)
}

struct PredictArgs {
    model: PathBuf,
    points: PathBuf,
    ci: Option<CiKind>,
    level: f64,
    data: Option<PathBuf>,
    resamples: usize,
    seed: u64,
    out: Option<PathBuf>,
}

fn predict(a: PredictArgs) -> Result<()> {
    let file = ModelFile::load(&a.model)?;
    let points = read_points(open(&a.points)?)?;
    if file.model.dim().is_some_and(|d| d != points.dim()) {
        return Err(QsbError::format(format!(
            "model expects {} inputs, points have {}",
            file.model.dim().unwrap_or(0),
            points.dim()
        )));
    }
    let q = file.model.predict(&points);
    let tau = file.model.tau();
    let intervals: Option<Vec<Interval>> = match a.ci {
        None => None,
        Some(CiKind::Bayes) => Some(
            points
                .rows()
                .map(|x| {
                    let (m, v) = file.model.predictive(x).ok_or_else(|| {
                        QsbError::format("Bayesian intervals need a QK or VB model")
                    })?;
                    Ok(bayesian_ci(m, v, a.level)?)
                })
                .collect::<Result<_>>()?,
        ),
        Some(CiKind::Chernoff) => {
            let knn = file
                .model
                .as_knn()
                .ok_or_else(|| QsbError::format("Chernoff intervals need a KN model"))?;
            Some(
                points
                    .rows()
                    .map(|x| {
                        Ok(knn_chernoff_ci(
                            &knn.neighbor_values(x),
                            tau,
                            1.0 - a.level,
                        )?)
                    })
                    .collect::<Result<_>>()?,
            )
        }
        Some(CiKind::Bootstrap) => {
            let method = file
                .model
                .method()
                .ok_or_else(|| QsbError::format("bootstrap needs a fitted method"))?;
            if method == MethodId::QK {
                return Err(QsbError::format(
                    "bootstrap intervals are not available for QK",
                ));
            }
            let path = a
                .data
                .as_ref()
                .ok_or_else(|| QsbError::Config("--ci bootstrap needs --data".into()))?;
            let data = read_dataset(open(path)?)?.flattened();
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let factory = |d: &qsb_core::Dataset, t: QuantileLevel, g: &qsb_core::Points| {
                Ok(fit_with_hyper(method, d, t, &file.hyper, &file.settings)?.predict(g))
            };
            Some(bootstrap_ci(
                factory,
                &data,
                tau,
                &points,
                a.resamples,
                a.level,
                &mut rng,
            )?)
        }
    };
    match &a.out {
        Some(path) => write_predictions(create(path)?, &points, &q, intervals.as_deref()),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_predictions(&mut lock, &points, &q, intervals.as_deref())?;
            lock.flush().map_err(|e| QsbError::io("<stdout>", e))
        }
    }
}
