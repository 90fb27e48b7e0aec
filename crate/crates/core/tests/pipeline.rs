use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::GrayImage;
use slideseg_core::classes::CLASS_NAMES;
use slideseg_core::classifier::checkpoint::{load_base, load_lora};
use slideseg_core::config::ExperimentConfig;
use slideseg_core::metrics::necrosis_rate;
use slideseg_core::pipeline::{
    cmd_evaluate, cmd_generate, cmd_infer, cmd_report, cmd_train_classifier, cmd_train_refiner,
    sha256_file, EvalManifest, EvaluationReport, GenerateOutput, RunLedger, Workspace,
};
use slideseg_core::refiner::NetworkConfig;
use slideseg_core::synthgen::DatasetManifest;
use slideseg_core::tensor_file::TensorFile;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.geometry.region = 64;
    cfg.geometry.k = 2;
    cfg.geometry.wsi = 256;
    cfg.data.source_wsis = 1;
    cfg.data.train_wsis = 2;
    cfg.data.eval_wsis = 2;
    cfg.classifier.pretrain_epochs = 2;
    cfg.classifier.epochs = 2;
    cfg.refiner.steps = 20;
    cfg.refiner.n_steps = 5;
    cfg.refiner.train_steps = 6;
    cfg.refiner.batch_size = 2;
    cfg.refiner.crop = 32;
    cfg.refiner.network = NetworkConfig {
        cond_width: 4,
        base_width: 8,
        stem: 2,
    };
    cfg
}

struct Run {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    ws: Workspace,
    generated: GenerateOutput,
    report: EvaluationReport,
    first_refiner_hit: bool,
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(3);
        let ws = Workspace::at(dir.path(), &cfg);
        let generated = cmd_generate(&cfg, &ws, 1).unwrap();
        cmd_train_classifier(&cfg, &ws).unwrap();
        let first_refiner_hit = cmd_train_refiner(&cfg, &ws).unwrap().cache_hit;
        cmd_infer(&cfg, &ws, 1, None).unwrap();
        let report = cmd_evaluate(&cfg, &ws).unwrap();
        cmd_report(&cfg, &ws).unwrap();
        Run {
            _dir: dir,
            cfg,
            ws,
            generated,
            report,
            first_refiner_hit,
        }
    })
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn artifact_hashes(ws: &Workspace, stage: &str) -> BTreeMap<String, String> {
    let ledger = RunLedger::load_or_new(&ws.ledger()).unwrap();
    ledger
        .last(stage)
        .unwrap()
        .artifacts
        .iter()
        .map(|a| (a.path.clone(), a.sha256.clone()))
        .collect()
}

#[test]
fn generate_writes_manifests_and_held_out_slides() {
    let r = run();
    for p in [
        &r.generated.source_manifest,
        &r.generated.patch_manifest,
        &r.generated.region_manifest,
    ] {
        let m = DatasetManifest::load(p).unwrap();
        assert!(!m.items.is_empty());
        m.validate(p.parent().unwrap()).unwrap();
    }
    let eval = EvalManifest::load(&r.generated.eval_manifest).unwrap();
    assert!(eval.slides.len() >= 2);
    let header: Vec<&str> = r
        .generated
        .table
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .collect();
    assert_eq!(header[1..], CLASS_NAMES);
    let total: u64 = r.generated.distribution.iter().flatten().sum();
    let patches = DatasetManifest::load(&r.generated.patch_manifest)
        .unwrap()
        .items
        .len();
    assert_eq!(total as usize, patches);
}

#[test]
fn generate_is_reproducible() {
    let r = run();
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::at(dir.path(), &r.cfg);
    cmd_generate(&r.cfg, &ws, 2).unwrap();
    let a = artifact_hashes(&r.ws, "generate");
    let b = artifact_hashes(&ws, "generate");
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn classifier_checkpoints_share_the_frozen_base() {
    let r = run();
    let base = load_base(&r.ws.base_checkpoint()).unwrap();
    let tuned = load_lora(&r.ws.base_checkpoint(), &r.ws.lora_checkpoint()).unwrap();
    assert_eq!(
        base.frozen_checksum().unwrap(),
        tuned.frozen_checksum().unwrap()
    );
    let lora = TensorFile::load(&r.ws.lora_checkpoint()).unwrap();
    assert_eq!(
        lora.meta["base_sha256"],
        sha256_file(&r.ws.base_checkpoint()).unwrap()
    );
    let (b, l) = (
        std::fs::metadata(r.ws.base_checkpoint()).unwrap().len(),
        std::fs::metadata(r.ws.lora_checkpoint()).unwrap().len(),
    );
    assert!(l < b, "LoRA checkpoint {l} bytes, base {b} bytes");

    let ledger = RunLedger::load_or_new(&r.ws.ledger()).unwrap();
    let ev = ledger.last("train-classifier").unwrap();
    assert_eq!(
        ev.curves["target_val_accuracy"].len(),
        r.cfg.classifier.epochs
    );
}

#[test]
fn refiner_losses_decompose_and_cache_is_reused() {
    let r = run();
    assert!(!r.first_refiner_hit);
    let ledger = RunLedger::load_or_new(&r.ws.ledger()).unwrap();
    let ev = ledger.last("train-refiner").unwrap();
    let (total, trans, seg) = (
        &ev.curves["l_ref"],
        &ev.curves["l_trans"],
        &ev.curves["l_seg"],
    );
    assert_eq!(total.len(), r.cfg.refiner.train_steps);
    for i in 0..total.len() {
        assert!(
            (total[i] - (trans[i] + r.cfg.refiner.lambda * seg[i])).abs() <= 1e-12 * total[i].abs()
        );
    }

    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::at(dir.path(), &r.cfg);
    ws.create().unwrap();
    copy_tree(&r.ws.root, &ws.root);
    std::fs::remove_file(ws.ledger()).unwrap();
    let again = cmd_train_refiner(&r.cfg, &ws).unwrap();
    assert!(again.cache_hit);
    assert_eq!(
        sha256_file(&ws.refiner_checkpoint()).unwrap(),
        sha256_file(&r.ws.refiner_checkpoint()).unwrap()
    );
}

fn copy_tree(from: &Path, to: &Path) {
    for f in files_under(from) {
        let dest = to.join(f.strip_prefix(from).unwrap());
        std::fs::create_dir_all(dest.parent().unwrap()).unwrap();
        std::fs::copy(&f, dest).unwrap();
    }
}

fn load_gray(p: &Path) -> GrayImage {
    image::open(p).unwrap().to_luma8()
}

#[test]
fn rasters_match_slide_size_and_coarse_is_patchwise() {
    let r = run();
    let eval = EvalManifest::load(&r.ws.eval_manifest()).unwrap();
    let patch = r.cfg.geometry.patch as u32;
    for s in &eval.slides {
        let gt = load_gray(&r.ws.eval_dir().join(&s.labels));
        let coarse = load_gray(&r.ws.coarse_raster(&s.name));
        let refined = load_gray(&r.ws.refined_raster(&s.name));
        assert_eq!(coarse.dimensions(), gt.dimensions());
        assert_eq!(refined.dimensions(), gt.dimensions());
        for (x, y, p) in coarse.enumerate_pixels() {
            assert_eq!(p, coarse.get_pixel(x - x % patch, y - y % patch));
        }
    }
}

#[test]
fn inference_is_repeatable_and_handles_odd_sizes() {
    let r = run();
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::at(dir.path(), &r.cfg);
    ws.create().unwrap();
    copy_tree(&r.ws.root, &ws.root);
    cmd_infer(&r.cfg, &ws, 2, None).unwrap();
    let eval = EvalManifest::load(&r.ws.eval_manifest()).unwrap();
    for s in &eval.slides {
        assert_eq!(
            std::fs::read(ws.refined_raster(&s.name)).unwrap(),
            std::fs::read(r.ws.refined_raster(&s.name)).unwrap()
        );
    }

    let first = eval.slides[0].image.clone();
    let img = image::open(r.ws.eval_dir().join(first)).unwrap().to_rgb8();
    let odd = image::imageops::crop_imm(&img, 0, 0, 100, 90).to_image();
    let path = dir.path().join("odd_slide.png");
    odd.save(&path).unwrap();
    let out = cmd_infer(&r.cfg, &ws, 1, Some(&path)).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].name, "odd_slide");
    assert_eq!(load_gray(&out[0].coarse).dimensions(), (100, 90));
    assert_eq!(load_gray(&out[0].refined).dimensions(), (100, 90));
}

#[test]
fn evaluation_cross_checks_against_rasters() {
    let r = run();
    let eval = EvalManifest::load(&r.ws.eval_manifest()).unwrap();
    assert_eq!(r.report.slides.len(), eval.slides.len());
    for (s, scores) in eval.slides.iter().zip(&r.report.slides) {
        let r_pr = necrosis_rate(&load_gray(&r.ws.eval_dir().join(&s.labels))).unwrap();
        for (raster, m) in [
            (r.ws.coarse_raster(&s.name), &scores.coarse),
            (r.ws.refined_raster(&s.name), &scores.refined),
        ] {
            let r_dl = necrosis_rate(&load_gray(&raster)).unwrap();
            assert_eq!(m.necrosis.abs_diff, (r_pr - r_dl).abs());
        }
        assert!(r.ws.figure(&s.name).exists());
    }
    let stored: EvaluationReport =
        serde_json::from_slice(&std::fs::read(r.ws.metrics_json()).unwrap()).unwrap();
    assert_eq!(&stored, &r.report);
    let csv = std::fs::read_to_string(r.ws.metrics_csv()).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * eval.slides.len());
    let summary = std::fs::read_to_string(r.ws.summary()).unwrap();
    assert!(summary.contains("Coarse") && summary.contains("Refined"));
}

#[test]
fn ledger_lists_every_written_file() {
    let r = run();
    let ledger = RunLedger::load_or_new(&r.ws.ledger()).unwrap();
    ledger.verify(&r.ws).unwrap();
    let listed: Vec<String> = ledger
        .events
        .iter()
        .flat_map(|e| e.artifacts.iter().map(|a| a.path.clone()))
        .collect();
    for f in files_under(&r.ws.root) {
        if f == r.ws.ledger() {
            continue;
        }
        let rel = r.ws.relative(&f);
        assert!(listed.contains(&rel), "{rel} missing from the ledger");
    }
    let stages: Vec<&str> = ledger.events.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(
        stages,
        [
            "generate",
            "train-classifier",
            "train-refiner",
            "infer",
            "evaluate",
            "report"
        ]
    );
}

#[test]
fn missing_prerequisites_are_reported() {
    let cfg = small_config(0);
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::at(dir.path(), &cfg);
    assert_eq!(cmd_train_classifier(&cfg, &ws).unwrap_err().exit_code(), 3);
    assert_eq!(cmd_train_refiner(&cfg, &ws).unwrap_err().exit_code(), 3);
    assert_eq!(
        cmd_infer(&cfg, &ws, 1, None)
            .map(|_| ())
            .unwrap_err()
            .exit_code(),
        3
    );
    assert_eq!(
        cmd_evaluate(&cfg, &ws).map(|_| ()).unwrap_err().exit_code(),
        3
    );
    assert_eq!(
        cmd_report(&cfg, &ws).map(|_| ()).unwrap_err().exit_code(),
        3
    );
}
