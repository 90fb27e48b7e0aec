use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::ledger::StageRecorder;
use super::workspace::{require, EvalManifest, Workspace};
use crate::classes::{CLASS_NAMES, NUM_CLASSES};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    confusion, segmentation_metrics, tnr_report, NecrosisReport, SegmentationMetrics,
};
use crate::tiling::LabelMap;

/// Display colors for label rasters.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [255, 255, 255],
    [200, 40, 120],
    [110, 70, 30],
    [230, 170, 60],
    [120, 160, 230],
    [60, 170, 90],
    [150, 150, 150],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub segmentation: SegmentationMetrics,
    pub necrosis: NecrosisReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideScores {
    pub name: String,
    pub coarse: MethodScores,
    pub refined: MethodScores,
}

/// Slide-averaged headline numbers of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub tnr_abs_diff: f64,
    pub class_fraction_diff: [f64; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub slides: Vec<SlideScores>,
    pub coarse: MeanScores,
    pub refined: MeanScores,
}

fn score(pred: &LabelMap, gt: &LabelMap) -> Result<MethodScores> {
    Ok(MethodScores {
        segmentation: segmentation_metrics(&confusion(pred, gt)?)?,
        necrosis: tnr_report(pred, gt)?,
    })
}

fn mean_scores(all: &[&MethodScores]) -> MeanScores {
    let n = all.len() as f64;
    let avg = |f: &dyn Fn(&MethodScores) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / n;
    MeanScores {
        miou: avg(&|m| m.segmentation.miou),
        precision: avg(&|m| m.segmentation.precision),
        recall: avg(&|m| m.segmentation.recall),
        tnr_abs_diff: avg(&|m| m.necrosis.abs_diff),
        class_fraction_diff: std::array::from_fn(|c| avg(&|m| m.necrosis.class_fraction_diff[c])),
    }
}

pub fn colorize(labels: &LabelMap) -> RgbImage {
    RgbImage::from_fn(labels.width(), labels.height(), |x, y| {
        let c = labels.get_pixel(x, y)[0] as usize;
        Rgb(PALETTE.get(c).copied().unwrap_or([0, 0, 0]))
    })
}

/// Ground truth, coarse and refined rasters side by side with 8-pixel gaps.
pub fn comparison_figure(gt: &LabelMap, coarse: &LabelMap, refined: &LabelMap) -> RgbImage {
    const GAP: u32 = 8;
    let (w, h) = gt.dimensions();
    let mut out = RgbImage::from_pixel(3 * w + 2 * GAP, h, Rgb([0, 0, 0]));
    for (i, m) in [gt, coarse, refined].into_iter().enumerate() {
        image::imageops::replace(&mut out, &colorize(m), (i as u32 * (w + GAP)) as i64, 0);
    }
    out
}

fn metrics_csv(report: &EvaluationReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "slide",
        "method",
        "miou",
        "precision",
        "recall",
        "r_dl",
        "r_pr",
        "tnr_abs_diff",
    ]
    .map(String::from)
    .to_vec();
    header.extend(CLASS_NAMES.iter().map(|c| format!("iou_{c}")));
    header.extend(CLASS_NAMES.iter().map(|c| format!("fraction_diff_{c}")));
    w.write_record(&header)?;
    for s in &report.slides {
        for (method, m) in [("coarse", &s.coarse), ("refined", &s.refined)] {
            let seg = &m.segmentation;
            let nec = &m.necrosis;
            let mut row = vec![s.name.clone(), method.to_string()];
            row.extend(
                [
                    seg.miou,
                    seg.precision,
                    seg.recall,
                    nec.r_dl,
                    nec.r_pr,
                    nec.abs_diff,
                ]
                .map(|v| v.to_string()),
            );
            row.extend(
                seg.per_class_iou
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
            );
            row.extend(nec.class_fraction_diff.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn load_labels(path: &std::path::Path) -> Result<LabelMap> {
    require(path)?;
    Ok(image::open(path)?.to_luma8())
}

/// Scores the coarse and refined rasters of every held-out slide against its
/// ground truth.
pub fn cmd_evaluate(cfg: &ExperimentConfig, ws: &Workspace) -> Result<EvaluationReport> {
    cfg.validate()?;
    let manifest = EvalManifest::load(&ws.eval_manifest())?;
    if manifest.slides.is_empty() {
        return Err(Error::Empty("no held-out slides".into()));
    }
    ws.create()?;
    std::fs::create_dir_all(ws.reports.join("figures"))?;
    let mut rec = StageRecorder::start(ws, "evaluate", cfg)?;
    let mut slides = Vec::with_capacity(manifest.slides.len());
    for s in &manifest.slides {
        let gt = load_labels(&ws.eval_dir().join(&s.labels))?;
        let coarse = load_labels(&ws.coarse_raster(&s.name))?;
        let refined = load_labels(&ws.refined_raster(&s.name))?;
        slides.push(SlideScores {
            name: s.name.clone(),
            coarse: score(&coarse, &gt)?,
            refined: score(&refined, &gt)?,
        });
        let fig = ws.figure(&s.name);
        comparison_figure(&gt, &coarse, &refined).save(&fig)?;
        rec.artifact(&fig)?;
    }
    let report = EvaluationReport {
        seed: cfg.seed,
        coarse: mean_scores(&slides.iter().map(|s| &s.coarse).collect::<Vec<_>>()),
        refined: mean_scores(&slides.iter().map(|s| &s.refined).collect::<Vec<_>>()),
        slides,
    };
    std::fs::write(ws.metrics_json(), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(ws.metrics_csv(), metrics_csv(&report)?)?;
    rec.artifact(&ws.metrics_json())?;
    rec.artifact(&ws.metrics_csv())?;
    rec.value("coarse", &report.coarse)?;
    rec.value("refined", &report.refined)?;
    rec.finish()?;
    Ok(report)
}
