use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ClassifierModel, ParamRole};
use crate::classes::ClassId;
use crate::error::{Error, Result};
use crate::nn::{images_to_tensor, scalar};
use crate::synthgen::{DatasetKind, DatasetManifest, Split};
use crate::tiling::{assemble_coarse_mask, split_into_patches, ProbMask};

/// A labeled training patch.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub image: RgbImage,
    pub label: ClassId,
}

/// Reads the patch images of one split of a patch manifest stored in `base`.
pub fn load_patch_samples(
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
) -> Result<Vec<PatchSample>> {
    if manifest.kind != DatasetKind::Patch {
        return Err(Error::InvalidArgument(format!(
            "{} is not a patch dataset",
            manifest.name
        )));
    }
    manifest
        .split(split)
        .map(|item| {
            let path = base.join(&item.image);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let label = item
                .label
                .ok_or_else(|| Error::InvalidArgument(format!("{} has no label", item.image)))?;
            Ok(PatchSample {
                image: image::open(&path)?.to_rgb8(),
                label: ClassId::from_u8(label)?,
            })
        })
        .collect()
}

/// Stacks samples into an image tensor and a `u32` label vector.
pub fn batch_tensors(samples: &[&PatchSample], dtype: DType) -> Result<(Tensor, Tensor)> {
    let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images, dtype)?;
    let y: Vec<u32> = samples.iter().map(|s| s.label as u32).collect();
    Ok((x, Tensor::new(y, &Device::Cpu)?))
}

/// Mean cross-entropy of the model on a batch, as a graph node.
pub fn classification_loss(
    model: &ClassifierModel,
    images: &Tensor,
    labels: &Tensor,
) -> Result<Tensor> {
    let logits = model.forward(images)?;
    Ok(candle_nn::loss::cross_entropy(&logits, labels)?)
}

fn finite_loss(loss: &Tensor, what: &str) -> Result<f64> {
    let v = scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("{what}: loss is {v}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 1e-3,
            batch_size: 64,
        }
    }
}

/// Adam over every parameter of the model, used before adapters exist.
pub struct BaseTrainer {
    opt: AdamW,
}

impl BaseTrainer {
    pub fn new(model: &ClassifierModel, lr: f64) -> Result<Self> {
        let vars = model.params().iter().map(|(p, _)| p.var.clone()).collect();
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self { opt })
    }

    /// One optimizer step; returns the loss before it.
    pub fn step(
        &mut self,
        model: &ClassifierModel,
        images: &Tensor,
        labels: &Tensor,
    ) -> Result<f64> {
        let loss = classification_loss(model, images, labels)?;
        let value = finite_loss(&loss, "pretraining")?;
        self.opt.backward_step(&loss)?;
        Ok(value)
    }
}

/// Full-parameter Adam training on the source patches, after which every base
/// parameter is frozen. Returns the mean loss of each epoch.
pub fn pretrain_base(
    model: &mut ClassifierModel,
    samples: &[PatchSample],
    opts: PretrainOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("pretraining set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut trainer = BaseTrainer::new(model, opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, y) = batch_tensors(&batch, model.dtype())?;
            total += trainer.step(model, &x, &y)? * chunk.len() as f64;
        }
        history.push(total / samples.len() as f64);
    }
    model.freeze_base();
    Ok(history)
}

/// One plain gradient-descent step on the adapters and the head:
/// `θ ← θ − η ∇θ L`. Returns the loss before the update.
pub fn lora_train_step(
    model: &mut ClassifierModel,
    images: &Tensor,
    labels: &Tensor,
    eta: f64,
) -> Result<f64> {
    if model.lora_rank.is_none() {
        return Err(Error::InvalidArgument(
            "lora_train_step needs attached adapters".into(),
        ));
    }
    if images.dim(0)? == 0 {
        return Err(Error::Empty("training batch".into()));
    }
    let loss = classification_loss(model, images, labels)?;
    let value = finite_loss(&loss, "LoRA step")?;
    let grads = loss.backward()?;
    for (p, role) in model.params() {
        if role == ParamRole::Base || p.frozen {
            continue;
        }
        if let Some(g) = grads.get(&p.var) {
            let next = (p.var.as_tensor() - (g * eta)?)?;
            let norm = scalar(&next.abs()?.sum_all()?)?;
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("LoRA step: {} diverged", p.name)));
            }
            p.var.set(&next)?;
        }
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
}

/// Runs `lora_train_step` over shuffled batches; returns mean loss per epoch.
pub fn finetune_lora(
    model: &mut ClassifierModel,
    samples: &[PatchSample],
    opts: FinetuneOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("fine-tuning set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (x, y) = batch_tensors(&batch, model.dtype())?;
            total += lora_train_step(model, &x, &y, opts.eta)? * chunk.len() as f64;
        }
        history.push(total / samples.len() as f64);
    }
    Ok(history)
}

/// Softmax probabilities for each patch, one row per image.
pub fn classify_patches(model: &ClassifierModel, patches: &[&RgbImage]) -> Result<Vec<Vec<f32>>> {
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    let x = images_to_tensor(patches, model.dtype())?;
    let logits = model.forward(&x)?.detach();
    let probs = candle_nn::ops::softmax(&logits, 1)?;
    Ok(probs.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

pub fn classify_patch(model: &ClassifierModel, patch: &RgbImage) -> Result<Vec<f32>> {
    Ok(classify_patches(model, &[patch])?.remove(0))
}

/// Coarse mask of a region: every patch footprint carries that patch's
/// softmax vector.
pub fn classify_region(model: &ClassifierModel, region: &RgbImage) -> Result<ProbMask> {
    let s = model.config.image_size;
    let (grid, patches) = split_into_patches(region, (s, s))?;
    let refs: Vec<&RgbImage> = patches.iter().collect();
    let probs = classify_patches(model, &refs)?;
    assemble_coarse_mask(&probs, &grid)
}

/// Fraction of samples whose argmax matches the label.
pub fn accuracy(model: &ClassifierModel, samples: &[PatchSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(256) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        for (probs, s) in classify_patches(model, &imgs)?.iter().zip(chunk) {
            if crate::tiling::argmax_lowest(probs) == s.label.index() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
