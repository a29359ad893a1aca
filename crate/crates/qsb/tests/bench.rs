use qsb::bench::{cell_hash, cells, run_bench, run_cell, truth_grid, CellKey, CONSTANT_LABEL};
use qsb::config::BenchConfig;
use qsb::report::{load_results, summarise, GroupKey};
use qsb_core::model::MethodId;
use qsb_core::problems::make_test_case;

fn small_config() -> BenchConfig {
    let mut cfg = BenchConfig::from_toml(
        r#"
        problems = [1]
        sizes = [1]
        taus = [0.2, 0.7]
        methods = ["KN", "RF", "RK"]
        replicates = 2
        parallelism = 2
        soo_budget = 12
        [settings.forest]
        n_trees = 40
        "#,
    )
    .unwrap();
    cfg.seed = 5;
    cfg
}

#[test]
fn cell_rows_are_anchored_and_ranked() {
    let cfg = small_config();
    let key = CellKey {
        problem: 1,
        size_level: 1,
        tau: 0.7,
        replicate: 0,
    };
    let rec = run_cell(&cfg, &key).unwrap();
    assert_eq!(rec.results.len(), 1 + cfg.methods.len());
    let cq = &rec.results[0];
    assert_eq!(cq.method, CONSTANT_LABEL);
    assert_eq!(cq.e_cq, Some(100.0));
    let mut ranks: Vec<usize> = rec.results[1..].iter().map(|r| r.rank.unwrap()).collect();
    ranks.sort_unstable();
    assert_eq!(ranks, vec![1, 2, 3]);
    for r in &rec.results[1..] {
        assert!(r.error.is_none(), "{}: {:?}", r.method, r.error);
        assert_eq!(r.n, 40);
        assert!(r.oracle_e_l2.unwrap() <= r.e_l2.unwrap());
        assert!(r.delta_e.unwrap() >= 0.0);
        assert_eq!(r.hyper.len(), r.hyper_names.len());
        assert!(rec.traces[&r.method].len() <= 12);
    }
}

#[test]
fn identical_seeds_give_identical_rows() {
    let cfg = small_config();
    let key = CellKey {
        problem: 1,
        size_level: 1,
        tau: 0.2,
        replicate: 1,
    };
    let a = run_cell(&cfg, &key).unwrap();
    let b = run_cell(&cfg, &key).unwrap();
    let strip = |rs: &[qsb::bench::BenchResult]| {
        rs.iter()
            .map(|r| {
                let mut r = r.clone();
                r.wall_time_s = 0.0;
                serde_json::to_string(&r).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.results), strip(&b.results));
}

#[test]
fn runs_resume_from_checkpoints() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let first = run_bench(&cfg, dir.path()).unwrap();
    assert_eq!(first.computed, 4);
    assert_eq!(first.reused, 0);
    let second = run_bench(&cfg, dir.path()).unwrap();
    assert_eq!(second.computed, 0);
    assert_eq!(second.reused, 4);
    assert_eq!(first.results, second.results);
    assert!(dir.path().join("results.csv").exists());
    for key in cells(&cfg) {
        let h = cell_hash(&cfg, &key);
        assert!(dir.path().join("cells").join(format!("{h}.json")).exists());
        assert!(dir
            .path()
            .join("traces")
            .join(format!("{h}_KN.jsonl"))
            .exists());
    }
    let loaded = load_results(dir.path()).unwrap();
    assert_eq!(loaded.len(), 4 * 4);
    for s in summarise(&loaded, GroupKey::Overall) {
        if s.method == CONSTANT_LABEL {
            assert_eq!(s.e_cq.unwrap().median, 100.0);
        } else {
            let r = s.rank.unwrap();
            assert!(r.q1 >= 1.0 && r.q3 <= 3.0);
        }
    }
}

#[test]
fn cell_hash_tracks_settings() {
    let cfg = small_config();
    let key = cells(&cfg)[0];
    let mut other = cfg.clone();
    other.settings.forest.n_trees = 41;
    assert_ne!(cell_hash(&cfg, &key), cell_hash(&other, &key));
    let mut same = cfg.clone();
    same.parallelism = 7;
    assert_eq!(cell_hash(&cfg, &key), cell_hash(&same, &key));
}

#[test]
fn failed_methods_are_recorded_not_fatal() {
    let mut cfg = small_config();
    cfg.methods = vec![MethodId::KN, MethodId::QK];
    cfg.settings.qk.b_boot = 1;
    let key = CellKey {
        problem: 1,
        size_level: 1,
        tau: 0.5,
        replicate: 0,
    };
    let rec = run_cell(&cfg, &key).unwrap();
    let qk = rec.results.iter().find(|r| r.method == "QK").unwrap();
    let kn = rec.results.iter().find(|r| r.method == "KN").unwrap();
    assert!(qk.error.as_deref().unwrap().contains("resamples"));
    assert_eq!(qk.e_cq, None);
    assert_eq!(qk.rank, Some(2));
    assert!(kn.error.is_none());
    assert_eq!(kn.rank, Some(1));
}

#[test]
fn truth_grids_have_the_standard_sizes() {
    let p1 = make_test_case(1).unwrap();
    let g = truth_grid(&p1, None, 0).unwrap();
    assert_eq!(g.len(), 250);
    assert_eq!(g.row(0)[0], -1.0);
    assert_eq!(g.row(249)[0], 1.0);
    let p2 = make_test_case(2).unwrap();
    let g2 = truth_grid(&p2, None, 0).unwrap();
    assert_eq!((g2.len(), g2.dim()), (4000, 2));
    assert_eq!(g2, truth_grid(&p2, None, 0).unwrap());
}
