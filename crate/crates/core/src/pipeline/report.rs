use std::fmt::Write as _;

use super::evaluate::EvaluationReport;
use super::ledger::StageRecorder;
use super::workspace::{require, Workspace};
use crate::classes::CLASS_NAMES;
use crate::config::ExperimentConfig;
use crate::error::Result;

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Segmentation and necrosis tables for a finished evaluation.
pub fn render_report(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let (c, r) = (&report.coarse, &report.refined);
    let _ = writeln!(
        out,
        "Segmentation, mean over {} held-out slides (seed {})",
        report.slides.len(),
        report.seed
    );
    let _ = writeln!(
        out,
        "{:<10}{:>12}{:>12}{:>12}",
        "Method", "mIOU", "Precision", "Recall"
    );
    for (name, m) in [("Coarse", c), ("Refined", r)] {
        let _ = writeln!(
            out,
            "{name:<10}{:>12}{:>12}{:>12}",
            pct(m.miou),
            pct(m.precision),
            pct(m.recall)
        );
    }
    out.push('\n');
    let _ = writeln!(out, "Absolute difference from ground truth");
    let _ = write!(out, "{:<10}", "Method");
    for name in &CLASS_NAMES[1..] {
        let _ = write!(out, "{name:>9}");
    }
    let _ = writeln!(out, "{:>9}", "TNR");
    for (name, m) in [("Coarse", c), ("Refined", r)] {
        let _ = write!(out, "{name:<10}");
        for v in &m.class_fraction_diff[1..] {
            let _ = write!(out, "{:>9}", pct(*v));
        }
        let _ = writeln!(out, "{:>9}", pct(m.tnr_abs_diff));
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<10}{:>10}{:>10}{:>10}{:>10}",
        "Slide", "r_PR", "r_coarse", "r_refined", "dIOU"
    );
    for s in &report.slides {
        let _ = writeln!(
            out,
            "{:<10}{:>10.4}{:>10.4}{:>10.4}{:>10}",
            s.name,
            s.coarse.necrosis.r_pr,
            s.coarse.necrosis.r_dl,
            s.refined.necrosis.r_dl,
            pct(s.refined.segmentation.miou - s.coarse.segmentation.miou),
        );
    }
    out
}

/// Renders the tables from the stored metrics and writes the summary file.
pub fn cmd_report(cfg: &ExperimentConfig, ws: &Workspace) -> Result<String> {
    require(&ws.metrics_json())?;
    let mut rec = StageRecorder::start(ws, "report", cfg)?;
    let report: EvaluationReport = serde_json::from_slice(&std::fs::read(ws.metrics_json())?)?;
    let text = render_report(&report);
    std::fs::write(ws.summary(), &text)?;
    rec.artifact(&ws.summary())?;
    rec.finish()?;
    Ok(text)
}
