use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn suan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_suan")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.in.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_applies_flags_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nmax_steps = 200\n");
    let out = dir.path().join("run");
    let o = suan(&[
        "run", "--config", &cfg, "--seed", "4", "--mode", "source_only", "--out", out.to_str().unwrap(),
        "--threshold", "0.3", "--w0", "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mode source_only seed 4"));

    let emitted = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(emitted.contains("seed = 4"));
    assert!(emitted.contains("mode = \"source_only\""));
    assert!(emitted.contains("eval_threshold = 0.3"));
    assert!(emitted.contains("w0 = 0"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["threshold"], 0.3);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nmax_steps = 150\n");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = suan(&["run", "--config", &cfg, "--seed", "9", "--out", d.to_str().unwrap()]);
        assert!(o.status.success());
    }
    for f in ["eval_report.json", "trace.csv", "register.json", "weight_groups.csv", "bound.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[train]\nmax_steps = 100\n[sweep]\nparameter = \"scenario.num_target_private\"\nvalues = [0, 2, 4, 6]\n",
    );
    let out = dir.path().join("sweep");
    let o = suan(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn sweep_without_section_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = suan(&["sweep", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("[sweep]"));
}

#[test]
fn bound_calculator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[bound]\nsource_risk = 0.05\nempirical_divergence = 0.3\nlambda = 0.1\n",
    );
    let out = dir.path().join("bound");
    let o = suan(&["bound", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("bound "));
    for f in ["bound.json", "bound_scan_target_classes.csv", "bound_scan_common_fraction.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn check_passes() {
    let o = suan(&["check"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("ok")).count(), 8);
}

#[test]
fn bad_input_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!suan(&["run", "--w0", "2"]).status.success());
    assert!(!suan(&["run", "--mode", "fancy"]).status.success());
    let cfg = write_config(dir.path(), "[train]\nunknown_knob = 1\n");
    let o = suan(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.unknown_knob"));
    let o = suan(&["run", "--threshold", "1.5", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
}
