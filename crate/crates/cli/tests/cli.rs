use std::path::Path;
use std::process::{Command, Output};

use codream_cli::config::ExperimentConfig;

fn codream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codream"))
        .args(args)
        .env("CODREAM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.experiment.seeds = vec![0, 1];
    cfg.experiment.out = out.to_path_buf();
    cfg.task.samples_per_client = 60;
    cfg.task.test_samples = 100;
    cfg.clients.count = 2;
    cfg.clients.hidden = "16bn".into();
    cfg.server.hidden = "16bn".into();
    cfg.protocol.epochs = 2;
    cfg.protocol.rounds = 2;
    cfg.protocol.local_steps = 2;
    cfg.protocol.warmup_epochs = 2;
    cfg.protocol.dream_batch = 16;
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_key_exits_with_config_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(&dir.path().join("out"))
        .to_toml()
        .lines()
        .filter(|l| !l.starts_with("lr_global"))
        .collect::<Vec<_>>()
        .join("\n");
    let path = dir.path().join("config.toml");
    std::fs::write(&path, text).unwrap();
    let out = codream(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("lr_global"), "{}", stderr(&out));
}

#[test]
fn out_of_range_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(&dir.path().join("out"));
    cfg.protocol.rounds = 0;
    let path = dir.path().join("config.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out = codream(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("rounds"), "{}", stderr(&out));
}

#[test]
fn repeated_runs_write_identical_files_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let config = write_config(dir.path(), &tiny_config(out));
        let o = codream(&["run", "--config", &config, "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let first = std::fs::read(a.join("codream-seed3.jsonl")).unwrap();
    let second = std::fs::read(b.join("codream-seed3.jsonl")).unwrap();
    assert!(!first.is_empty());
    assert_eq!(first, second);

    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,runs,client_accuracy"));
    assert!(summary.contains("codream,1,"));
    let comm = std::fs::read_to_string(a.join("comm.csv")).unwrap();
    assert!(comm.lines().count() >= 2);
}

#[test]
fn sweep_covers_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let config = write_config(dir.path(), &tiny_config(&out));
    let o = codream(&["sweep", "--config", &config, "--seed", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    for m in ["avgkd", "centralized", "codream", "fedavg", "independent"] {
        assert!(summary.contains(&format!("\n{m},1,")), "{m} missing:\n{summary}");
    }
    let report = codream(&["report", "--out", out.to_str().unwrap()]);
    assert!(report.status.success());
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap(), summary);
}

#[test]
fn report_on_empty_directory_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = codream(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_passes_when_pristine() {
    let o = codream(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn selftest_names_an_injected_fault() {
    let o = codream(&["selftest", "--inject-fault", "adv-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL adv_regularizer"), "{stdout}");
}

#[test]
fn default_config_parses() {
    let o = codream(&["default-config"]);
    assert!(o.status.success());
    let cfg = ExperimentConfig::parse(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg, ExperimentConfig::desk());
}
