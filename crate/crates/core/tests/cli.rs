use std::path::{Path, PathBuf};
use std::process::Command;

fn dtc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dtc"))
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    let out = dtc().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = dtc().args(["sweep", "--workers", "0", "-q", "-o"]).arg(tempfile::tempdir().unwrap().path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_fails_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[timeseries]\nspeeed = 3.0\n").unwrap();
    let out = dtc().args(["scene-gen", "-q", "--config"]).arg(&cfg).arg("-o").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn scene_gen_writes_scenes_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dtc()
        .args(["scene-gen", "-q", "--seed", "9", "--map.resolution", "7.5", "-o"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scene.json", "scene_new.json", "resolved_config.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let cfg = dtclab::cli::RunConfig::from_toml(&std::fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap())
        .unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.map.resolution, 7.5);
    let a = std::fs::read(dir.path().join("scene.json")).unwrap();
    let b = std::fs::read(dir.path().join("scene_new.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn reference_config_matches_defaults() {
    let text = std::fs::read_to_string(smoke_config().with_file_name("reference.toml")).unwrap();
    assert_eq!(dtclab::cli::RunConfig::from_toml(&text).unwrap(), dtclab::cli::RunConfig::default());
}

fn reproduce(dir: &Path, workers: &str) {
    let out = dtc()
        .args(["reproduce", "-q", "--workers", workers, "--config"])
        .arg(smoke_config())
        .arg("-o")
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn smoke_reproduce_is_deterministic_across_workers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    reproduce(a.path(), "1");
    reproduce(b.path(), "3");
    for f in [
        "report.json",
        "curve.csv",
        "curve.svg",
        "table2.csv",
        "table2.txt",
        "loop_log.jsonl",
        "loop_summary.json",
        "channel_map.csv",
        "training_curves.svg",
        "models/gpt.ckpt",
        "datasets/timeseries/manifest.json",
    ] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    for f in ["curve.csv", "table2.csv", "loop_log.jsonl", "channel_map.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let report = dtclab::experiments::MetricsReport::read(a.path().join("report.json")).unwrap();
    assert_eq!(report.table2.len(), 6);
    assert_eq!(report.horizon_nmse["gpt"].len(), 20);
}
