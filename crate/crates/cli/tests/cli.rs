use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn csicount(args: &[&str], dataset_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csicount"));
    cmd.args(args).env("RUST_LOG", "warn").env_remove("CSI_DATASET_ROOT");
    if let Some(root) = dataset_root {
        cmd.env("CSI_DATASET_ROOT", root);
    }
    cmd.output().unwrap()
}

fn out_dir(dir: &Path) -> String {
    format!("output_dir={:?}", dir.display().to_string())
}

#[test]
fn report_on_empty_output_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("desk_counting.toml");
    let out = csicount(&["report", "--config", cfg.to_str().unwrap(), "--set", &out_dir(dir.path())], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("no runs"));
}

#[test]
fn missing_config_fails() {
    let out = csicount(&["prepare", "--config", "/nonexistent/config.toml"], None);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_override_fails() {
    let cfg = config("desk_counting.toml");
    let out = csicount(&["prepare", "--config", cfg.to_str().unwrap(), "--set", "train.epochz=3"], None);
    assert!(!out.status.success());
}

#[test]
fn missing_dataset_root_is_diagnosed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("wimans_standard.toml");
    let args = ["prepare", "--config", cfg.to_str().unwrap(), "--set"];

    let out = csicount(&[&args[..], &[out_dir(dir.path()).as_str()]].concat(), None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("CSI_DATASET_ROOT"));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = csicount(&[&args[..], &[out_dir(dir.path()).as_str()]].concat(), Some(&empty));
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("manifest.csv"), "{stderr}");
}

#[test]
fn synthetic_prepare_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("desk_counting.toml");
    let out = csicount(
        &[
            "prepare",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            &out_dir(dir.path()),
            "--set",
            "data.synthetic.n_samples=30",
        ],
        None,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("run "), "{stdout}");
    let runs: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(runs.len(), 1);
}
