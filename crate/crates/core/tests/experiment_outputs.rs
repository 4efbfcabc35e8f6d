use std::path::Path;
use std::process::Command;

use amc_kfac::experiment::config::DataSource;
use amc_kfac::experiment::solve::format_matrix_text;
use amc_kfac::experiment::train::RunStatus;
use amc_kfac::experiment::{
    load_datasets, parse_matrix_text, run_solve, run_training, train, ExperimentConfig, OptimizerKind, RunSummary,
    SolveReport, TrainOptions, METRICS_HEADER,
};
use amc_kfac::nn::FEATURES;
use amc_kfac::numeric::Matrix;
use amc_kfac::Error;

fn synthetic(optimizer: OptimizerKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.source = DataSource::Synthetic;
    cfg.train.optimizer = optimizer;
    cfg
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn kfac_amc_run_is_byte_reproducible_and_complete() {
    let cfg = synthetic(OptimizerKind::KfacAmc);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let rec = run_training(&cfg, a.path()).unwrap();
    run_training(&cfg, b.path()).unwrap();

    let metrics = read(&a.path().join("metrics.csv"));
    assert_eq!(metrics, read(&b.path().join("metrics.csv")));
    assert_eq!(read(&a.path().join("features.csv")), read(&b.path().join("features.csv")));

    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 51);
    assert_eq!(lines[0], METRICS_HEADER.join(","));
    for (k, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), METRICS_HEADER.len(), "{line}");
        assert_eq!(fields[0], (k + 1).to_string());
        assert!(fields.iter().all(|f| !f.is_empty()), "{line}");
    }

    assert_eq!(rec.update_vector_count(), 400);
    assert_eq!(rec.statistics.leaf_solves, rec.rows.last().unwrap().hp_solves);
    let summary: RunSummary = serde_json::from_str(&read(&a.path().join("summary.json"))).unwrap();
    assert_eq!(summary.status, RunStatus::Completed);
    assert_eq!(summary.epochs_completed, 50);
    assert_eq!(summary.update_vectors, 400);
    assert_eq!(summary.header.config_sha256, cfg.sha256());
    assert_eq!(summary.counters, rec.statistics);
}

#[test]
fn precision_schedule_is_enforced_per_solve() {
    let cfg = synthetic(OptimizerKind::KfacAmc);
    let data = load_datasets(&cfg).unwrap();
    let rec = train(&cfg, &data, &TrainOptions::default()).unwrap();
    for row in &rec.rows {
        let want = if row.epoch <= 28 { 24 } else { 26 };
        assert_eq!(row.precision_bits, Some(want));
        assert!(row.solves_by_bits.keys().all(|&b| b == want), "epoch {}: {:?}", row.epoch, row.solves_by_bits);
    }
    let total: u64 = rec.statistics.solves_by_bits.values().sum();
    assert_eq!(total, rec.statistics.leaf_solves);
}

#[test]
fn features_cover_the_test_split() {
    let cfg = synthetic(OptimizerKind::Adam);
    let dir = tempfile::tempdir().unwrap();
    let rec = run_training(&cfg, dir.path()).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join("features.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.len(), FEATURES + 2);
    assert_eq!((&header[0], &header[1], &header[2]), ("sample_id", "label", "f0"));
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), rec.test_labels.len());
    assert_eq!(rows.len(), cfg.data.per_class_test * 4);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0].parse::<usize>().unwrap(), k);
        assert_eq!(row[1].parse::<usize>().unwrap(), rec.test_labels[k]);
        assert!(row.iter().skip(2).all(|v| v.parse::<f64>().unwrap() >= 0.0));
    }
    let metrics = read(&dir.path().join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 121);
    let first = metrics.lines().nth(1).unwrap();
    assert!(first.contains(",,"), "first-order runs leave analog columns empty: {first}");
}

#[test]
fn aborted_run_flushes_partial_outputs() {
    let mut cfg = synthetic(OptimizerKind::KfacAmc);
    cfg.train.max_refinement_iters = 1;
    cfg.train.reprogram_retries = 0;
    let dir = tempfile::tempdir().unwrap();
    let err = run_training(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Training { epoch: 1, step: 1, .. }), "{err}");
    let summary: RunSummary = serde_json::from_str(&read(&dir.path().join("summary.json"))).unwrap();
    assert!(matches!(summary.status, RunStatus::Aborted { epoch: 1, step: 1, .. }));
    assert_eq!(read(&dir.path().join("metrics.csv")).lines().count(), 1);
}

#[test]
fn solve_identity_recovers_basis_vector() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    std::fs::write(&a, format_matrix_text(&Matrix::identity(4))).unwrap();
    std::fs::write(&b, "4 1\n1\n0\n0\n0\n").unwrap();
    let out = dir.path().join("out");
    let report = run_solve(&a, &b, 24, &ExperimentConfig::default(), &out).unwrap();
    let x = parse_matrix_text(&read(&out.join("solution.txt"))).unwrap();
    for i in 0..4 {
        let want = if i == 0 { 1.0 } else { 0.0 };
        assert!((x[(i, 0)] - want).abs() <= report.tolerance, "{x:?}");
    }
    let saved: SolveReport = serde_json::from_str(&read(&out.join("solve_report.json"))).unwrap();
    assert_eq!(saved, report);
    assert_eq!(saved.counters.leaf_solves, 1);
}

#[test]
fn solve_36_by_36_fixture_meets_residual_bound() {
    let n = 36;
    // diagonally dominant, entries within the device dynamic range
    let a = Matrix::from_fn(n, n, |i, j| if i == j { 4.0 } else { 0.4 + 0.2 * ((i * 7 + j * 11) % 5) as f64 / 4.0 });
    let a = a.add(&a.transpose()).unwrap().scale(0.5);
    let b = Matrix::from_fn(n, 2, |i, j| ((i + 3 * j) % 7) as f64 - 3.0);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    std::fs::write(&pa, format_matrix_text(&a)).unwrap();
    std::fs::write(&pb, format_matrix_text(&b)).unwrap();
    let report = run_solve(&pa, &pb, 24, &ExperimentConfig::default(), dir.path()).unwrap();
    assert_eq!((report.size, report.rhs_columns), (36, 2));
    assert!(report.relative_residual <= report.residual_bound, "{report:?}");
    assert!(report.counters.leaf_solves > 0);
    assert!(!report.partition.is_empty());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_amc-kfac"))
}

#[test]
fn cli_solve_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.txt"), "2 2\n2 0.5\n0.5 1\n").unwrap();
    std::fs::write(dir.path().join("b.txt"), "2 1\n1\n1\n").unwrap();
    let out = dir.path().join("out");
    let status = cli()
        .args(["solve", "--matrix"])
        .arg(dir.path().join("a.txt"))
        .arg("--rhs")
        .arg(dir.path().join("b.txt"))
        .args(["--bits", "20", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: SolveReport = serde_json::from_slice(&status.stdout).unwrap();
    assert_eq!(report.total_bits, 20);
    let x = parse_matrix_text(&read(&out.join("solution.txt"))).unwrap();
    // [[2, .5], [.5, 1]]⁻¹ (1, 1) = (2/7, 6/7)
    assert!((x[(0, 0)] - 2.0 / 7.0).abs() < 1e-4 && (x[(1, 0)] - 6.0 / 7.0).abs() < 1e-4, "{x:?}");
}

#[test]
fn cli_train_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\noptimizer = \"sgdm\"\nepochs = 3\n").unwrap();
    let out = dir.path().join("out");
    let run = cli()
        .args(["train", "--synthetic", "--seed", "7", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: RunSummary = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary.header.seed, 7);
    assert_eq!(summary.header.optimizer, OptimizerKind::Sgdm);
    assert_eq!(read(&out.join("metrics.csv")).lines().count(), 4);
}

#[test]
fn cli_reports_errors_once() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "2 2\n1 x\n").unwrap();
    let run = cli().args(["solve", "--matrix"]).arg(&bad).arg("--rhs").arg(&bad).output().unwrap();
    assert!(!run.status.success());
    let stderr = String::from_utf8_lossy(&run.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error:") && stderr.contains("offset 6"), "{stderr}");

    let run = cli().args(["train"]).current_dir(dir.path()).output().unwrap();
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("EMNIST"));
}
