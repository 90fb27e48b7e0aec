use std::path::Path;
use std::process::{Command, Output};

use slideseg_core::classes::CLASS_NAMES;
use slideseg_core::config::ExperimentConfig;
use slideseg_core::refiner::NetworkConfig;

fn slideseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slideseg"))
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.geometry.region = 64;
    cfg.geometry.k = 2;
    cfg.geometry.wsi = 256;
    cfg.data.source_wsis = 1;
    cfg.data.train_wsis = 1;
    cfg.data.eval_wsis = 2;
    cfg.classifier.pretrain_epochs = 1;
    cfg.classifier.epochs = 1;
    cfg.refiner.steps = 10;
    cfg.refiner.n_steps = 2;
    cfg.refiner.train_steps = 2;
    cfg.refiner.batch_size = 1;
    cfg.refiner.crop = 32;
    cfg.refiner.network = NetworkConfig {
        cond_width: 2,
        base_width: 4,
        stem: 2,
    };
    cfg.paths.workspace = dir.join("ws");
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn show_config_prints_the_defaults() {
    let out = slideseg(&["show-config"]);
    assert!(out.status.success());
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(ExperimentConfig::load(&shipped).unwrap(), cfg);

    let out = slideseg(&[
        "--seed",
        "41",
        "--workspace",
        "/tmp/elsewhere",
        "show-config",
    ]);
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 41);
    assert_eq!(cfg.paths.workspace, Path::new("/tmp/elsewhere"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.geometry.k = 5;
    let path = write_config(dir.path(), &cfg);
    assert_eq!(
        slideseg(&["--config", &path, "generate"]).status.code(),
        Some(2)
    );

    let text = small_config(dir.path()).to_toml().unwrap().replacen(
        "seed = 0",
        "seed = 0\nsprinkles = true",
        1,
    );
    let path = dir.path().join("unknown.toml");
    std::fs::write(&path, text).unwrap();
    let out = slideseg(&["--config", path.to_str().unwrap(), "generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sprinkles"));

    let missing = dir.path().join("nope.toml");
    assert_eq!(
        slideseg(&["--config", missing.to_str().unwrap(), "generate"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_artifacts_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path()));
    for verb in [
        "train-classifier",
        "train-refiner",
        "infer",
        "evaluate",
        "report",
    ] {
        let out = slideseg(&["--config", &path, verb]);
        assert_eq!(out.status.code(), Some(3), "{verb}");
    }
}

#[test]
fn every_verb_runs_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &small_config(dir.path()));
    let out = slideseg(&["--config", &path, "--threads", "1", "generate"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8(out.stdout).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header[1..], CLASS_NAMES);
    for verb in [
        "train-classifier",
        "train-refiner",
        "infer",
        "evaluate",
        "report",
    ] {
        let out = slideseg(&["--config", &path, verb]);
        assert!(
            out.status.success(),
            "{verb}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let ws = dir.path().join("ws");
    for f in [
        "reports/metrics.json",
        "reports/metrics.csv",
        "reports/summary.txt",
        "outputs/eval_00_refined.png",
    ] {
        assert!(ws.join(f).exists(), "{f}");
    }
    let slide = ws.join("data/eval/eval_01.png");
    let out = slideseg(&["--config", &path, "infer", "--wsi", slide.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .starts_with("eval_01"));
}

#[test]
fn diverging_training_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    let path = write_config(dir.path(), &cfg);
    assert!(slideseg(&["--config", &path, "generate"]).status.success());
    cfg.classifier.eta = 1e30;
    cfg.classifier.batch_size = 8;
    let path = write_config(dir.path(), &cfg);
    let out = slideseg(&["--config", &path, "train-classifier"]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
