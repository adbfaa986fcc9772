use std::path::PathBuf;

use antler_core::io::{Dataset, PointCloud};
use antler_core::pipeline::{
    evaluate_antler, evaluate_baselines, evaluate_fold, fold_plan, fold_rmse_csv, prepare_fold, read_results_csv,
    results_csv, run_experiment, summarize, tune_lambdas, LambdaChoice, PipelineConfig, ResultRow, METHODS,
};
use antler_core::{Error, Lambdas};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> PipelineConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json");
    PipelineConfig::load(&path).unwrap()
}

/// Points scattered in a small box around `center`.
fn blob(id: &str, n: usize, center: f64, spread: f64, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n)
        .map(|_| [0; 3].map(|_| center + spread * rng.random::<f64>()))
        .collect();
    PointCloud::new(id, pts).unwrap()
}

fn blob_dataset() -> Dataset {
    let samples: Vec<PointCloud> = (0..12).map(|i| blob(&format!("s{i:02}"), 12, i as f64 * 0.01, 1.0, i)).collect();
    let responses = (0..12).map(|i| vec![i as f64 * 0.1]).collect();
    Dataset::new(samples, responses).unwrap()
}

#[test]
fn test_samples_never_shape_training() {
    let cfg = tiny();
    let plain = blob_dataset();
    // Same training data; the held-out cloud is far denser than anything in training.
    let mut dense = plain.clone();
    dense.samples[11] = blob("s11", 600, 0.0, 1.2, 99);
    dense.responses[11] = vec![1e6];

    let train: Vec<usize> = (0..11).collect();
    let a = prepare_fold(&cfg, &plain, 0, &train, &[11]).unwrap();
    let b = prepare_fold(&cfg, &dense, 0, &train, &[11]).unwrap();
    assert_eq!(a.grid, b.grid);
    assert_eq!(a.m_r, b.m_r);
    assert_eq!(a.train_samples, b.train_samples);
    assert_eq!(a.targets, b.targets);
    assert_eq!(a.posterior, b.posterior);
    assert_eq!(a.targets.len(), 11);
    assert_eq!(a.targets[0].len(), cfg.model.arch.latent_dim);

    assert_eq!(a.test, vec![11]);
    assert!(b.test.is_empty());
    assert_eq!(b.skipped.len(), 1);
    assert!(b.skipped[0].1.contains("M_r"), "{}", b.skipped[0].1);

    // The skipped sample is reported, and every method still has a row.
    let features: Vec<_> = antler_core::pipeline::baseline_features(&cfg, &dense);
    let outcome = evaluate_fold(&cfg, &dense, &features, &b, LambdaChoice::Configured);
    for m in METHODS {
        let rows: Vec<&ResultRow> = outcome.rows.iter().filter(|r| r.method == m).collect();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].status.starts_with("skipped"));
    }
    let skip: Vec<&ResultRow> = outcome.rows.iter().filter(|r| r.method == "skipped_sample").collect();
    assert_eq!(skip.len(), 1);
    assert!(skip[0].status.contains("s11"));
}

#[test]
fn test_responses_never_reach_training() {
    let mut cfg = tiny();
    cfg.tuning.budget = 2;
    cfg.tuning.bo.initial_design = 2;
    cfg.tuning.inner_folds = 2;
    let plain = blob_dataset();
    let mut shifted = plain.clone();
    for i in [9, 10, 11] {
        shifted.responses[i] = vec![-50.0];
    }
    let train: Vec<usize> = (0..9).collect();
    let test = [9, 10, 11];
    let a = prepare_fold(&cfg, &plain, 0, &train, &test).unwrap();
    let b = prepare_fold(&cfg, &shifted, 0, &train, &test).unwrap();

    let fixed = LambdaChoice::Fixed(Lambdas::default());
    let ma = evaluate_antler(&cfg, &plain, &a, fixed).model.unwrap();
    let mb = evaluate_antler(&cfg, &shifted, &b, fixed).model.unwrap();
    assert_eq!(ma.to_json().unwrap(), mb.to_json().unwrap());

    let (la, ta) = tune_lambdas(&cfg, &plain, &a).unwrap();
    let (lb, tb) = tune_lambdas(&cfg, &shifted, &b).unwrap();
    assert_eq!(la, lb);
    assert_eq!(ta, tb);

    // Baseline standardization uses training rows only, so only the test error moves.
    let fa = antler_core::pipeline::baseline_features(&cfg, &plain);
    let ra = evaluate_baselines(&cfg, &plain, &fa, 0, &train, &test);
    let rb = evaluate_baselines(&cfg, &shifted, &fa, 0, &train, &test);
    assert!(ra.iter().zip(&rb).all(|(x, y)| x.rmse.unwrap() < y.rmse.unwrap()));
}

#[test]
fn results_are_append_complete_and_seeded() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.failed_folds, 0);
    for m in METHODS {
        for fold in 0..3 {
            let n = report.rows.iter().filter(|r| r.method == m && r.fold == fold && r.response_index == Some(0)).count();
            assert_eq!(n, 1, "{m} fold {fold}");
        }
    }
    let skips = report.rows.iter().filter(|r| r.method == "skipped_sample").count();
    assert_eq!(report.rows.len(), 9 + skips);
    assert!(report.rows.iter().filter_map(|r| r.rmse).all(|v| v >= 0.0 && v.is_finite()));
    assert_eq!(read_results_csv(&report.results_path).unwrap(), report.rows);

    let mut other = cfg.clone();
    other.evaluation.master_seed = 8;
    let dir2 = tempfile::tempdir().unwrap();
    let second = run_experiment(&other, dir2.path()).unwrap();
    assert_ne!(
        std::fs::read(&report.results_path).unwrap(),
        std::fs::read(&second.results_path).unwrap()
    );
}

#[test]
fn folds_partition_the_samples() {
    let cfg = tiny();
    let plan = fold_plan(&cfg, 24).unwrap();
    assert_eq!(plan.len(), 3);
    let mut seen = vec![0; 24];
    for (train, test) in &plan {
        assert_eq!(train.len() + test.len(), 24);
        for &i in test {
            seen[i] += 1;
            assert!(!train.contains(&i));
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(plan, fold_plan(&cfg, 24).unwrap());
}

#[test]
fn config_parsing_and_validation() {
    let defaults = PipelineConfig::default();
    assert_eq!(PipelineConfig::from_json(&defaults.to_json().unwrap()).unwrap(), defaults);
    assert_eq!(PipelineConfig::from_json("{}").unwrap(), defaults);
    assert!(defaults.validate().is_ok());

    assert!(matches!(PipelineConfig::from_json(r#"{ "gird": {} }"#), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::from_json("[1, 2"), Err(Error::Config(_))));

    let invalid = [
        r#"{ "evaluation": { "folds": 1 } }"#,
        r#"{ "sampler": { "m_r": 0 } }"#,
        r#"{ "grid": { "initial_dims": [32, 32, 32], "max_dim": 16 } }"#,
        r#"{ "dataset": { "kind": "wave", "unstructure": { "m_l": 100, "m_u": 200, "m_r": 50 } } }"#,
        r#"{ "tuning": { "enabled": true, "tune": [false, false, false] } }"#,
        r#"{ "tuning": { "enabled": true, "budget": 3 } }"#,
    ];
    for text in invalid {
        let cfg = PipelineConfig::from_json(text).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn summaries_and_boxplot_table() {
    let row = |method: &str, fold, rmse: Option<f64>, status: &str| ResultRow {
        method: method.into(),
        fold,
        response_index: Some(0),
        rmse,
        status: status.into(),
    };
    let rows = vec![
        row("antler", 0, Some(1.0), "ok"),
        row("mean", 0, Some(2.0), "ok"),
        row("antler", 1, Some(3.0), "ok"),
        row("mean", 1, None, "failed: diverged, \"badly\""),
        ResultRow {
            method: "skipped_sample".into(),
            fold: 1,
            response_index: None,
            rmse: None,
            status: "skipped: sample x".into(),
        },
    ];
    let summary = summarize(&rows);
    assert_eq!(summary.len(), 2);
    assert_eq!((summary[0].mean_rmse, summary[0].folds), (2.0, 2));
    assert!((summary[0].sd_rmse - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!((summary[1].mean_rmse, summary[1].sd_rmse, summary[1].folds), (2.0, 0.0, 1));

    assert_eq!(fold_rmse_csv(&rows), "fold,response_index,antler,mean\n0,0,1,2\n1,0,3,\n");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    std::fs::write(&path, results_csv(&rows)).unwrap();
    assert_eq!(read_results_csv(&path).unwrap(), rows);
}
