//! The experiment as a sequence of stages sharing one workspace. Every stage
//! appends what it wrote to the run ledger.

mod evaluate;
mod generate;
mod infer;
mod ledger;
mod report;
mod train_classifier;
mod train_refiner;
mod workspace;

pub use evaluate::{
    cmd_evaluate, colorize, comparison_figure, EvaluationReport, MeanScores, MethodScores,
    SlideScores, PALETTE,
};
pub use generate::{cmd_generate, distribution_table, GenerateOutput};
pub use infer::{cmd_infer, load_models, predict_slide, InferOutput, Models, SlidePrediction};
pub use ledger::{Artifact, LedgerEvent, RunLedger, StageRecorder, CODE_VERSION};
pub use report::{cmd_report, render_report};
pub use train_classifier::{cmd_train_classifier, ClassifierSummary};
pub use train_refiner::{cmd_train_refiner, RefinerSummary};
pub use workspace::{derive_seed, require, sha256_file, EvalManifest, EvalSlide, Workspace};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// A rayon pool of `threads` workers; 0 means one per core.
pub fn worker_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Every stage in order.
pub fn run_all(cfg: &ExperimentConfig, ws: &Workspace, threads: usize) -> Result<EvaluationReport> {
    cmd_generate(cfg, ws, threads)?;
    cmd_train_classifier(cfg, ws)?;
    cmd_train_refiner(cfg, ws)?;
    cmd_infer(cfg, ws, threads, None)?;
    let report = cmd_evaluate(cfg, ws)?;
    cmd_report(cfg, ws)?;
    Ok(report)
}
