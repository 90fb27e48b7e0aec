use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::ledger::StageRecorder;
use super::workspace::{derive_seed, require, sha256_file, Workspace};
use crate::classifier::checkpoint::load_lora;
use crate::classifier::{classify_region, ClassifierModel};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::images_to_tensor;
use crate::refiner::{
    init_refiner, refiner_train_step, save_refiner, RefinerBatch, RefinerTrainer,
};
use crate::synthgen::{region_labels_path, DatasetManifest, Split};
use crate::tensor_file::{TensorFile, TensorRecord};
use crate::tiling::ProbMask;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinerSummary {
    pub regions: usize,
    pub cache_hit: bool,
    pub parameters: usize,
    pub total: Vec<f64>,
    pub transition: Vec<f64>,
    pub segmentation: Vec<f64>,
}

/// A training region held in memory as full-size tensors.
struct RegionTensors {
    /// `(C, R, R)` one-hot ground truth.
    x0: Tensor,
    /// `(C, R, R)` coarse probabilities.
    y: Tensor,
    /// `(3, R, R)` normalized image.
    o: Tensor,
}

fn coarse_cache_path(ws: &Workspace) -> Result<PathBuf> {
    let mut h = Sha256::new();
    h.update(sha256_file(&ws.base_checkpoint())?);
    h.update(sha256_file(&ws.lora_checkpoint())?);
    h.update(sha256_file(&ws.region_manifest())?);
    Ok(ws
        .cache
        .join(format!("coarse_{}.tnsr", &hex::encode(h.finalize())[..16])))
}

/// Coarse masks for the given items, read from the cache when the classifier
/// and region manifest are unchanged.
fn coarse_masks(
    ws: &Workspace,
    model: &ClassifierModel,
    images: &[image::RgbImage],
    names: &[String],
) -> Result<(Vec<Tensor>, bool)> {
    let path = coarse_cache_path(ws)?;
    if path.exists() {
        let file = TensorFile::load(&path)?;
        let cached: Result<Vec<Tensor>> = names.iter().map(|n| file.tensor(n).cloned()).collect();
        if let Ok(masks) = cached {
            return Ok((masks, true));
        }
    }
    let mut file = TensorFile::new(json!({ "kind": "coarse-cache" }));
    let mut masks = Vec::with_capacity(images.len());
    for (img, name) in images.iter().zip(names) {
        let m = classify_region(model, img)?.into_values();
        file.push(TensorRecord::new(name.clone(), m.clone()));
        masks.push(m);
    }
    file.save(&path)?;
    Ok((masks, false))
}

fn load_regions(ws: &Workspace, model: &ClassifierModel) -> Result<(Vec<RegionTensors>, bool)> {
    let manifest = DatasetManifest::load(&ws.region_manifest())?;
    let items: Vec<_> = manifest.split(Split::Train).collect();
    if items.is_empty() {
        return Err(Error::Empty("region training split".into()));
    }
    let dir = ws.region_dir();
    let mut images = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for item in &items {
        let p = dir.join(&item.image);
        require(&p)?;
        images.push(image::open(&p)?.to_rgb8());
        let l = dir.join(region_labels_path(item));
        require(&l)?;
        labels.push(image::open(&l)?.to_luma8());
    }
    let names: Vec<String> = items.iter().map(|i| i.image.clone()).collect();
    let (coarse, hit) = coarse_masks(ws, model, &images, &names)?;
    let regions = images
        .iter()
        .zip(&labels)
        .zip(coarse)
        .map(|((img, lab), y)| {
            Ok(RegionTensors {
                x0: ProbMask::one_hot(lab, DType::F32, &Device::Cpu)?.into_values(),
                y,
                o: images_to_tensor(&[img], DType::F32)?.squeeze(0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((regions, hit))
}

/// Random square crops from random regions.
fn crop_batch(
    regions: &[RegionTensors],
    n: usize,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<RefinerBatch> {
    let mut x0 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut o = Vec::with_capacity(n);
    for _ in 0..n {
        let r = &regions[rng.random_range(0..regions.len())];
        let (h, w) = (r.x0.dim(1)?, r.x0.dim(2)?);
        let top = rng.random_range(0..=h - crop);
        let left = rng.random_range(0..=w - crop);
        let cut =
            |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(1, top, crop)?.narrow(2, left, crop)?) };
        x0.push(cut(&r.x0)?);
        y.push(cut(&r.y)?);
        o.push(cut(&r.o)?);
    }
    Ok(RefinerBatch {
        x0: Tensor::stack(&x0, 0)?,
        y: Tensor::stack(&y, 0)?,
        o: Tensor::stack(&o, 0)?,
    })
}

/// Trains the bridge refiner on coarse masks of the training regions.
pub fn cmd_train_refiner(cfg: &ExperimentConfig, ws: &Workspace) -> Result<RefinerSummary> {
    cfg.validate()?;
    for p in [
        ws.base_checkpoint(),
        ws.lora_checkpoint(),
        ws.region_manifest(),
    ] {
        require(&p)?;
    }
    ws.create()?;
    let mut rec = StageRecorder::start(ws, "train-refiner", cfg)?;
    let r = &cfg.refiner;

    let model = load_lora(&ws.base_checkpoint(), &ws.lora_checkpoint())?;
    let (regions, cache_hit) = load_regions(ws, &model)?;
    let crop = r.crop.min(regions[0].x0.dim(1)?);

    let state = init_refiner(
        &cfg.refiner_config(),
        derive_seed(cfg.seed, "refiner-init", 0),
        DType::F32,
    )?;
    let mut trainer = RefinerTrainer::new(&state, r.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "refiner-train", 0));
    let mut summary = RefinerSummary {
        regions: regions.len(),
        cache_hit,
        parameters: state.numel(),
        total: Vec::with_capacity(r.train_steps),
        transition: Vec::with_capacity(r.train_steps),
        segmentation: Vec::with_capacity(r.train_steps),
    };
    for _ in 0..r.train_steps {
        let batch = crop_batch(&regions, r.batch_size, crop, &mut rng)?;
        let l = refiner_train_step(&state, &mut trainer, &batch, &mut rng)?;
        summary.total.push(l.total);
        summary.transition.push(l.transition);
        summary.segmentation.push(l.segmentation);
    }
    save_refiner(&state, &ws.refiner_checkpoint())?;

    rec.artifact(&coarse_cache_path(ws)?)?;
    rec.artifact(&ws.refiner_checkpoint())?;
    rec.curve("l_ref", summary.total.clone());
    rec.curve("l_trans", summary.transition.clone());
    rec.curve("l_seg", summary.segmentation.clone());
    rec.value("regions", summary.regions)?;
    rec.value("coarse_cache_hit", cache_hit)?;
    rec.value("parameters", summary.parameters)?;
    rec.finish()?;
    Ok(summary)
}
