//! Patch classifier: a tiny vision transformer whose attention projections
//! can carry low-rank adapters on top of a frozen pretrained base.

pub mod checkpoint;
pub mod lora;
mod model;
mod train;

pub use lora::{LoraAdapter, LoraLinear, LORA_A_INIT_STD};
pub use model::{init_classifier, Block, ClassifierModel, ParamRole, TinyVitConfig};
pub use train::{
    accuracy, batch_tensors, classification_loss, classify_patch, classify_patches,
    classify_region, finetune_lora, load_patch_samples, lora_train_step, pretrain_base,
    BaseTrainer, FinetuneOptions, PatchSample, PretrainOptions,
};
