use std::fs;

use metacurv::harness::{
    evaluate_checkpoint, exit_code, export_matrices, read_matrix_csv, run_training, write_matrix_csv, RunConfigFile,
    BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, METRICS_HEADER, RESOLVED_CONFIG,
};
use metacurv::{Checkpoint, Error, Matrix};
use proptest::prelude::*;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "method": "MC2",
  "sizes": [1, 6, 6, 1],
  "iterations": 8,
  "eval_every": 2,
  "eval_tasks": 4,
  "eval_points": 10,
  "meta_batch": 2,
  "deterministic": true
}"#;

#[test]
fn training_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfigFile::parse(SMALL).unwrap().resolve(Some(dir.path())).unwrap();
    let summary = run_training(&cfg, false, |_| {}).unwrap();
    assert_eq!(summary.iterations, 8);
    assert_eq!(summary.rows, 4);
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().next(), Some(METRICS_HEADER));
    assert_eq!(metrics.lines().count(), 5);
    let best = Checkpoint::load(dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(Some((best.iteration, best.best.unwrap().val_loss)), summary.best);
    assert_eq!(Checkpoint::load(dir.path().join(LAST_CHECKPOINT)).unwrap().iteration, 8);
    let resolved = fs::read_to_string(dir.path().join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved, cfg.to_json().unwrap());
    // The echoed configuration is itself a valid configuration.
    assert_eq!(RunConfigFile::parse(&resolved).unwrap().resolve(None).unwrap(), cfg);
}

#[test]
fn interrupted_training_resumes_to_identical_files() {
    let straight = TempDir::new().unwrap();
    let cfg = RunConfigFile::parse(SMALL)
        .unwrap()
        .resolve(Some(straight.path()))
        .unwrap();
    run_training(&cfg, false, |_| {}).unwrap();

    // Simulate a crash after iteration 4 by replaying its files, plus a
    // metrics row written after the last checkpoint.
    let resumed = TempDir::new().unwrap();
    let mut half = cfg.clone();
    half.out_dir = resumed.path().to_path_buf();
    let mut trainer = metacurv::Trainer::new(half.train.clone()).unwrap();
    let rows = std::cell::RefCell::new(vec![METRICS_HEADER.to_string()]);
    trainer
        .run_until(4, |row, t| {
            rows.borrow_mut().push(metacurv::harness::metrics_line(row));
            if let Some(b) = t.best_checkpoint().filter(|b| b.iteration == row.iteration) {
                b.save(resumed.path().join(BEST_CHECKPOINT))?;
            }
            Ok(())
        })
        .unwrap();
    trainer.checkpoint().save(resumed.path().join(LAST_CHECKPOINT)).unwrap();
    let mut lines = rows.into_inner();
    lines.push("6,stale".into());
    fs::write(resumed.path().join(METRICS_FILE), lines.join("\n") + "\n").unwrap();

    run_training(&half, true, |_| {}).unwrap();
    for f in [METRICS_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT] {
        assert_eq!(
            fs::read(straight.path().join(f)).unwrap(),
            fs::read(resumed.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn numeric_failure_keeps_last_good_checkpoint() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace(
        "\"deterministic\": true",
        "\"deterministic\": true, \"inner_lr\": 1e200",
    );
    let cfg = RunConfigFile::parse(&text).unwrap().resolve(Some(dir.path())).unwrap();
    let err = run_training(&cfg, false, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NumericFailure(_)));
    assert_eq!(exit_code(&err), 1);
    let last = Checkpoint::load(dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(last.iteration, 0);
    assert!(last.network().unwrap().is_finite());
}

#[test]
fn config_defaults_and_errors() {
    let r = RunConfigFile::parse(r#"{"method": "MetaSGD"}"#)
        .unwrap()
        .resolve(None)
        .unwrap();
    assert_eq!(r.train.method, metacurv::Method::MetaSgd);
    assert_eq!(
        (r.train.k_shot, r.train.meta_batch, r.train.iterations),
        (5, 25, 70_000)
    );
    assert_eq!((r.train.inner_lr, r.train.outer_lr), (0.01, 0.001));
    assert!(r.out_dir.to_str().unwrap().contains("MetaSGD"));

    let bad = RunConfigFile::parse(r#"{"method": "MC3"}"#).unwrap_err();
    assert_eq!(exit_code(&bad), 2);
    let bad = RunConfigFile::parse(r#"{"method": "MC2", "meta_batch": 0}"#)
        .unwrap()
        .resolve(None)
        .unwrap_err();
    assert_eq!(exit_code(&bad), 2);
    let missing = RunConfigFile::load("/nonexistent/config.json").unwrap_err();
    assert_eq!(exit_code(&missing), 1);
}

#[test]
fn evaluation_records_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfigFile::parse(SMALL).unwrap().resolve(Some(dir.path())).unwrap();
    run_training(&cfg, false, |_| {}).unwrap();
    let path = dir.path().join(BEST_CHECKPOINT);
    let a = evaluate_checkpoint(&path, 10, 5, 1, 3).unwrap();
    let b = evaluate_checkpoint(&path, 10, 5, 1, 3).unwrap();
    assert_eq!(a.to_line().unwrap(), b.to_line().unwrap());
    let c = evaluate_checkpoint(&path, 10, 10, 2, 3).unwrap();
    assert_eq!((c.k_shot, c.inner_steps), (10, 2));
    let zero = evaluate_checkpoint(&path, 0, 5, 1, 3).unwrap_err();
    assert_eq!(exit_code(&zero), 2);
}

#[test]
fn matrix_summaries_describe_the_dump() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfigFile::parse(SMALL).unwrap().resolve(Some(dir.path())).unwrap();
    run_training(&cfg, false, |_| {}).unwrap();
    let ckpt = Checkpoint::load(dir.path().join(LAST_CHECKPOINT)).unwrap();
    let out = dir.path().join("dump");
    let summaries = export_matrices(&ckpt, &out, 4096).unwrap();
    assert_eq!(summaries.len(), 6 * 4);
    for s in &summaries {
        let m = read_matrix_csv(&out.join(&s.file)).unwrap();
        let n = m.rows();
        let diag: f64 = (0..n).map(|i| m.get(i, i)).sum::<f64>() / n as f64;
        assert_eq!(s.diagonal_mean, diag);
        let off = (0..n * n)
            .filter(|k| k / n != k % n)
            .map(|k| m.data()[k].abs())
            .fold(0.0, f64::max);
        assert_eq!(s.max_abs_off_diagonal, off);
    }
}

proptest! {
    #[test]
    fn matrix_csv_round_trip_is_exact(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 36),
    ) {
        let m = Matrix::new(rows, cols, seed[..rows * cols].to_vec()).unwrap();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.csv");
        write_matrix_csv(&path, &m).unwrap();
        prop_assert_eq!(read_matrix_csv(&path).unwrap(), m);
    }
}
