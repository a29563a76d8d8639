use std::path::Path;

use csicount::experiment::{
    aggregate, cmd_analyze, cmd_evaluate, cmd_prepare, cmd_report, cmd_train, ExperimentConfig, RunRecord,
};
use csicount::train::TrainLog;
use csicount::Error;

const DESK: &str = include_str!("../../../configs/desk_counting.toml");
const DESK_INVARIANCE: &str = include_str!("../../../configs/desk_invariance.toml");

fn tiny_from(base: &str, out: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "data.synthetic.n_samples=40",
        "data.synthetic.t_length=96",
        "transform.target_length=96",
        "transform.resolution=32",
        "train.epochs=1",
        "train.batch_size=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.push(format!("output_dir={:?}", out.display().to_string()));
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_toml_str(base, &o).unwrap()
}

fn tiny(out: &Path, extra: &[&str]) -> ExperimentConfig {
    tiny_from(DESK, out, extra)
}

fn read_log(run: &Path) -> TrainLog {
    serde_json::from_str(&std::fs::read_to_string(run.join("split-0/train_log.json")).unwrap()).unwrap()
}

#[test]
fn identical_configs_give_identical_loss_logs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (run_a, rec_a) = cmd_train(&tiny(a.path(), &[]), None).unwrap();
    let (run_b, rec_b) = cmd_train(&tiny(b.path(), &[]), None).unwrap();
    let (la, lb) = (read_log(&run_a), read_log(&run_b));
    assert!(!la.steps.is_empty());
    assert_eq!(la.steps, lb.steps);
    assert_eq!(rec_a.splits[0].metrics, rec_b.splits[0].metrics);
    assert_eq!(rec_a.fingerprint, rec_b.fingerprint);
}

#[test]
fn evaluate_reproduces_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["task=\"identity_dependent\""]);
    let (run, trained) = cmd_train(&cfg, None).unwrap();
    let (path, evaluated) = cmd_evaluate(&cfg, Some(&run)).unwrap();
    assert_eq!(path, run.join("evaluation.json"));
    assert_eq!(trained, evaluated);
    // append-only: a second evaluation gets a new file
    let (second, _) = cmd_evaluate(&cfg, None).unwrap();
    assert_eq!(second, run.join("evaluation-2.json"));
}

#[test]
fn missing_checkpoint_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    let (run, rec) = cmd_train(&cfg, None).unwrap();
    std::fs::remove_file(run.join(&rec.splits[0].checkpoint)).unwrap();
    let err = cmd_evaluate(&cfg, Some(&run)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    assert!(!run.join("evaluation.json").exists());
}

#[test]
fn bad_pretrained_weights_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = tiny(&out, &["model.pretrained=true", "model.weights=\"/nonexistent/weights.safetensors\""]);
    assert!(cmd_train(&cfg, None).is_err());
    assert!(!out.exists(), "no run directory may be created");
}

#[test]
fn training_a_run_twice_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    let (run, _) = cmd_train(&cfg, None).unwrap();
    assert!(cmd_train(&cfg, Some(&run)).is_err());
    let other = tiny(dir.path(), &["train.seed=9"]);
    assert!(cmd_evaluate(&other, Some(&run)).is_err(), "fingerprint mismatch must be refused");
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn report_over_three_seeds_matches_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["protocol.seeds=[0, 1, 2]"]);
    let (run, rec) = cmd_train(&cfg, None).unwrap();
    assert_eq!(rec.splits.len(), 3);
    assert_eq!(rec.aggregate, aggregate(&rec.splits));
    let stored: RunRecord = serde_json::from_str(&std::fs::read_to_string(run.join("record.json")).unwrap()).unwrap();
    assert_eq!(stored.aggregate, aggregate(&stored.splits));

    let maes: Vec<f64> = rec.splits.iter().map(|s| s.metrics.counting.as_ref().unwrap().mae).collect();
    let (mean, sd) = mean_sd(&maes);
    let agg = &rec.aggregate["mae"];
    assert_eq!(agg.n, 3);
    assert!((agg.mean - mean).abs() < 1e-12 && (agg.sd - sd).abs() < 1e-12);

    let (out, report) = cmd_report(dir.path()).unwrap();
    let out = out.unwrap();
    for f in ["report.md", "report.json", "per_activity_mae.csv", "per_user_count.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let table = report.tables.iter().find(|t| t.title.starts_with("Standard protocol")).unwrap();
    let col = table.header.iter().position(|h| h == "mae").unwrap();
    assert_eq!(table.rows[0][col], format!("{mean:.4} ± {sd:.4}"));
    assert_eq!(report.per_activity_mae.len(), 9);
}

#[test]
fn empty_output_reports_no_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (out, report) = cmd_report(dir.path()).unwrap();
    assert!(out.is_none());
    assert_eq!(report.render(), "no runs\n");
    // prepared but untrained runs are not reported
    cmd_prepare(&tiny(dir.path(), &[])).unwrap();
    assert_eq!(cmd_report(dir.path()).unwrap().1.render(), "no runs\n");
}

#[test]
fn report_refuses_mismatched_records() {
    let dir = tempfile::tempdir().unwrap();
    let (run, mut rec) = cmd_train(&tiny(dir.path(), &[]), None).unwrap();
    rec.splits[0].task = csicount::model::Task::IdentityDependent;
    std::fs::write(run.join("record.json"), serde_json::to_string(&rec).unwrap()).unwrap();
    assert!(cmd_report(dir.path()).is_err());
}

#[test]
fn analysis_is_recorded_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_from(DESK_INVARIANCE, dir.path(), &["data.synthetic.n_samples=120"]);
    let (run, _) = cmd_train(&cfg, None).unwrap();
    let (path, inv) = cmd_analyze(&cfg, Some(&run)).unwrap();
    assert_eq!(path, run.join("invariance.json"));
    assert!(inv.report.users.len() >= 2);
    let n = inv.report.users.len();
    assert_eq!(inv.report.pairs.len(), n * (n - 1) / 2);
    let (_, report) = cmd_report(dir.path()).unwrap();
    assert!(report.render().contains(&format!("{:.2}", inv.report.euclidean_mean)));
}
