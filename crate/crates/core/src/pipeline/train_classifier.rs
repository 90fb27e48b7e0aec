use candle_core::DType;
use serde::Serialize;

use super::ledger::StageRecorder;
use super::workspace::{derive_seed, require, Workspace};
use crate::classifier::checkpoint::{save_base, save_lora};
use crate::classifier::{
    accuracy, finetune_lora, init_classifier, load_patch_samples, pretrain_base, FinetuneOptions,
    PretrainOptions,
};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::synthgen::{DatasetManifest, Split};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierSummary {
    pub pretrain_losses: Vec<f64>,
    /// Base accuracy on the source validation split.
    pub source_val_accuracy: f64,
    /// Base accuracy on the target validation split, before adaptation.
    pub target_val_accuracy_before: f64,
    pub finetune_losses: Vec<f64>,
    /// Target validation accuracy after each fine-tuning epoch.
    pub target_val_accuracy: Vec<f64>,
    pub target_test_accuracy: f64,
    pub frozen_checksum: String,
    pub base_sha256: String,
    pub lora_sha256: String,
}

/// Pretrains the base on the source family, then adapts it to the target
/// family through low-rank adapters.
pub fn cmd_train_classifier(cfg: &ExperimentConfig, ws: &Workspace) -> Result<ClassifierSummary> {
    cfg.validate()?;
    require(&ws.source_manifest())?;
    require(&ws.patch_manifest())?;
    ws.create()?;
    let mut rec = StageRecorder::start(ws, "train-classifier", cfg)?;
    let c = &cfg.classifier;

    let source = DatasetManifest::load(&ws.source_manifest())?;
    let target = DatasetManifest::load(&ws.patch_manifest())?;
    let source_train = load_patch_samples(&source, &ws.source_dir(), Split::Train)?;
    let source_val = load_patch_samples(&source, &ws.source_dir(), Split::Valid)?;
    let target_train = load_patch_samples(&target, &ws.patch_dir(), Split::Train)?;
    let target_val = load_patch_samples(&target, &ws.patch_dir(), Split::Valid)?;
    let target_test = load_patch_samples(&target, &ws.patch_dir(), Split::Test)?;

    let mut model = init_classifier(
        &c.model,
        derive_seed(cfg.seed, "classifier-init", 0),
        DType::F32,
    )?;
    let pretrain_losses = pretrain_base(
        &mut model,
        &source_train,
        PretrainOptions {
            epochs: c.pretrain_epochs,
            lr: c.pretrain_lr,
            batch_size: c.batch_size,
        },
        derive_seed(cfg.seed, "pretrain", 0),
    )?;
    let source_val_accuracy = accuracy(&model, &source_val)?;
    let target_val_accuracy_before = accuracy(&model, &target_val)?;
    let base_sha256 = save_base(&model, &ws.base_checkpoint())?;

    model.inject_lora(c.rank, derive_seed(cfg.seed, "lora-init", 0))?;
    let frozen_checksum = model.frozen_checksum()?;
    let opts = FinetuneOptions {
        epochs: 1,
        eta: c.eta,
        batch_size: c.batch_size,
    };
    let mut finetune_losses = Vec::with_capacity(c.epochs);
    let mut target_val_accuracy = Vec::with_capacity(c.epochs);
    for epoch in 0..c.epochs {
        let seed = derive_seed(cfg.seed, "finetune", epoch as u64);
        finetune_losses.extend(finetune_lora(&mut model, &target_train, opts, seed)?);
        target_val_accuracy.push(accuracy(&model, &target_val)?);
    }
    let target_test_accuracy = accuracy(&model, &target_test)?;
    let lora_sha256 = save_lora(&model, &ws.lora_checkpoint(), &base_sha256)?;

    rec.artifact(&ws.base_checkpoint())?;
    rec.artifact(&ws.lora_checkpoint())?;
    rec.curve("pretrain_loss", pretrain_losses.clone());
    rec.curve("finetune_loss", finetune_losses.clone());
    rec.curve("target_val_accuracy", target_val_accuracy.clone());
    let summary = ClassifierSummary {
        pretrain_losses,
        source_val_accuracy,
        target_val_accuracy_before,
        finetune_losses,
        target_val_accuracy,
        target_test_accuracy,
        frozen_checksum,
        base_sha256,
        lora_sha256,
    };
    rec.value("summary", &summary)?;
    rec.finish()?;
    Ok(summary)
}
