use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;

use super::ledger::StageRecorder;
use super::worker_pool;
use super::workspace::{derive_seed, EvalManifest, EvalSlide, Workspace};
use crate::classes::{CLASS_NAMES, NUM_CLASSES};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::synthgen::{
    derive_patch_dataset, derive_region_dataset, generate_wsi_with, region_labels_path,
    write_patch_items, write_region_items, DatasetKind, DatasetManifest, ManifestGeometry,
    ManifestItem, PatchDataset, Split, SplitFractions, SyntheticWsi, TextureParams,
};

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub source_manifest: PathBuf,
    pub patch_manifest: PathBuf,
    pub region_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    /// Patch counts per split and class of the target patch dataset.
    pub distribution: [[u64; NUM_CLASSES]; 3],
    pub table: String,
}

fn slides(
    cfg: &ExperimentConfig,
    family: &str,
    n: usize,
    texture: &TextureParams,
) -> Result<Vec<SyntheticWsi>> {
    let params = cfg.generator_params(texture);
    let side = cfg.geometry.wsi;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, family, i as u64);
            generate_wsi_with(seed, side, side, &cfg.generator.class_freqs, &params)
        })
        .collect()
}

fn manifest(
    cfg: &ExperimentConfig,
    name: &str,
    kind: DatasetKind,
    items: Vec<ManifestItem>,
) -> DatasetManifest {
    let g = &cfg.geometry;
    DatasetManifest {
        name: name.into(),
        kind,
        geometry: ManifestGeometry {
            height: g.wsi,
            width: g.wsi,
            region: (g.region, g.region),
            patch: (g.patch, g.patch),
        },
        items,
    }
}

/// Formats patch counts per split the way a dataset summary table reads.
pub fn distribution_table(counts: &[[u64; NUM_CLASSES]; 3]) -> String {
    let mut out = format!("{:<8}", "Dataset");
    for name in CLASS_NAMES {
        let _ = write!(out, "{name:>16}");
    }
    out.push('\n');
    let mut total = [0u64; NUM_CLASSES];
    for (label, row) in ["Train", "Valid", "Test"].iter().zip(counts) {
        let _ = write!(out, "{label:<8}");
        for (c, v) in row.iter().enumerate() {
            total[c] += v;
            let _ = write!(out, "{v:>16}");
        }
        out.push('\n');
    }
    let sum: u64 = total.iter().sum();
    let _ = write!(out, "{:<8}", "Total");
    for v in total {
        let pct = if sum > 0 {
            100.0 * v as f64 / sum as f64
        } else {
            0.0
        };
        let _ = write!(out, "{:>16}", format!("{v} ({pct:.2}%)"));
    }
    out.push('\n');
    out
}

fn distribution_csv(counts: &[[u64; NUM_CLASSES]; 3]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dataset".to_string()];
    header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    let mut total = [0u64; NUM_CLASSES];
    for (label, row) in ["Train", "Valid", "Test"].iter().zip(counts) {
        let mut rec = vec![label.to_string()];
        for (c, v) in row.iter().enumerate() {
            total[c] += v;
            rec.push(v.to_string());
        }
        w.write_record(&rec)?;
    }
    let mut rec = vec!["Total".to_string()];
    rec.extend(total.iter().map(|v| v.to_string()));
    w.write_record(&rec)?;
    w.into_inner()
        .map_err(|e| crate::Error::InvalidArgument(e.to_string()))
}

fn count_patches(sets: &[PatchDataset]) -> [[u64; NUM_CLASSES]; 3] {
    let mut counts = [[0u64; NUM_CLASSES]; 3];
    for rec in sets.iter().flat_map(|d| &d.records) {
        let row = match rec.split {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        };
        counts[row][rec.label.index()] += 1;
    }
    counts
}

/// Generates the source and target datasets and the held-out slides.
pub fn cmd_generate(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    threads: usize,
) -> Result<GenerateOutput> {
    cfg.validate()?;
    ws.create()?;
    for dir in [
        ws.source_dir(),
        ws.patch_dir(),
        ws.region_dir(),
        ws.eval_dir(),
    ] {
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
    }
    let mut rec = StageRecorder::start(ws, "generate", cfg)?;
    let g = &cfg.geometry;
    let splits = SplitFractions(cfg.data.splits);
    let split_seed = derive_seed(cfg.seed, "split", 0);
    let pool = worker_pool(threads)?;

    let (source, train, eval) = pool.install(|| -> Result<_> {
        Ok((
            slides(
                cfg,
                "source",
                cfg.data.source_wsis,
                &cfg.generator.source_texture,
            )?,
            slides(
                cfg,
                "train",
                cfg.data.train_wsis,
                &cfg.generator.target_texture,
            )?,
            slides(
                cfg,
                "eval",
                cfg.data.eval_wsis,
                &cfg.generator.target_texture,
            )?,
        ))
    })?;

    let mut source_items = Vec::new();
    for (i, wsi) in source.iter().enumerate() {
        let ds = derive_patch_dataset(wsi, g.patch, splits, split_seed)?;
        source_items.extend(write_patch_items(
            &ws.source_dir(),
            &format!("source_{i:02}"),
            &ds,
        )?);
    }
    let source_manifest = manifest(cfg, "source", DatasetKind::Patch, source_items);
    source_manifest.save(&ws.source_manifest())?;

    let mut patch_items = Vec::new();
    let mut region_items = Vec::new();
    let mut patch_sets = Vec::new();
    for (i, wsi) in train.iter().enumerate() {
        let name = format!("train_{i:02}");
        let ds = derive_patch_dataset(wsi, g.patch, splits, split_seed)?;
        patch_items.extend(write_patch_items(&ws.patch_dir(), &name, &ds)?);
        patch_sets.push(ds);
        let regions = derive_region_dataset(wsi, g.region, g.patch, splits, split_seed)?;
        region_items.extend(write_region_items(&ws.region_dir(), &name, &regions)?);
    }
    let patch_manifest = manifest(cfg, "target-patches", DatasetKind::Patch, patch_items);
    patch_manifest.save(&ws.patch_manifest())?;
    let region_manifest = manifest(cfg, "target-regions", DatasetKind::Region, region_items);
    region_manifest.save(&ws.region_manifest())?;

    let mut eval_slides = Vec::new();
    for (i, wsi) in eval.iter().enumerate() {
        let name = format!("eval_{i:02}");
        let image = format!("{name}.png");
        let labels = format!("{name}_labels.png");
        wsi.image.save(ws.eval_dir().join(&image))?;
        wsi.labels.save(ws.eval_dir().join(&labels))?;
        eval_slides.push(EvalSlide {
            name,
            image,
            labels,
            seed: wsi.seed,
        });
    }
    let eval_manifest = EvalManifest {
        slides: eval_slides,
    };
    eval_manifest.save(&ws.eval_manifest())?;

    let distribution = count_patches(&patch_sets);
    let table = distribution_table(&distribution);
    std::fs::write(ws.distribution_csv(), distribution_csv(&distribution)?)?;

    for (m, dir) in [
        (&source_manifest, ws.source_dir()),
        (&patch_manifest, ws.patch_dir()),
        (&region_manifest, ws.region_dir()),
    ] {
        for item in &m.items {
            rec.artifact(&dir.join(&item.image))?;
            if let Some(mask) = &item.mask {
                rec.artifact(&dir.join(mask))?;
                rec.artifact(&dir.join(region_labels_path(item)))?;
            }
        }
    }
    for s in &eval_manifest.slides {
        rec.artifact(&ws.eval_dir().join(&s.image))?;
        rec.artifact(&ws.eval_dir().join(&s.labels))?;
    }
    for p in [
        ws.source_manifest(),
        ws.patch_manifest(),
        ws.region_manifest(),
        ws.eval_manifest(),
        ws.distribution_csv(),
    ] {
        rec.artifact(&p)?;
    }
    rec.value("distribution", distribution)?;
    rec.value(
        "realized_freqs",
        train
            .iter()
            .chain(&eval)
            .map(|w| w.realized_freqs)
            .collect::<Vec<_>>(),
    )?;
    rec.finish()?;

    Ok(GenerateOutput {
        source_manifest: ws.source_manifest(),
        patch_manifest: ws.patch_manifest(),
        region_manifest: ws.region_manifest(),
        eval_manifest: ws.eval_manifest(),
        distribution,
        table,
    })
}
