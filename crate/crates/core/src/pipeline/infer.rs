use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ledger::StageRecorder;
use super::worker_pool;
use super::workspace::{derive_seed, require, EvalManifest, Workspace};
use crate::classifier::checkpoint::load_lora;
use crate::classifier::{classify_region, ClassifierModel};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::images_to_tensor;
use crate::refiner::{load_refiner, RefinerState, SampleMode};
use crate::tiling::{merge_regions, split_into_regions, LabelMap, MaskKind, ProbMask};

/// Regions refined together in one sampler call.
const REFINE_CHUNK: usize = 4;

pub struct Models {
    pub classifier: ClassifierModel,
    pub refiner: RefinerState,
}

pub fn load_models(ws: &Workspace) -> Result<Models> {
    for p in [
        ws.base_checkpoint(),
        ws.lora_checkpoint(),
        ws.refiner_checkpoint(),
    ] {
        require(&p)?;
    }
    Ok(Models {
        classifier: load_lora(&ws.base_checkpoint(), &ws.lora_checkpoint())?,
        refiner: load_refiner(&ws.refiner_checkpoint())?,
    })
}

#[derive(Debug, Clone)]
pub struct SlidePrediction {
    pub coarse: LabelMap,
    pub refined: LabelMap,
}

/// Coarse and refined label rasters for one slide.
pub fn predict_slide(
    models: &Models,
    image: &RgbImage,
    region: usize,
    n_steps: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<SlidePrediction> {
    let (grid, regions) = split_into_regions(image, (region, region))?;
    let coarse = regions
        .iter()
        .map(|r| classify_region(&models.classifier, r))
        .collect::<Result<Vec<ProbMask>>>()?;
    let coarse_map = merge_regions(&coarse, &grid)?;

    let dtype = models.refiner.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refined = Vec::with_capacity(regions.len());
    for (imgs, masks) in regions
        .chunks(REFINE_CHUNK)
        .zip(coarse.chunks(REFINE_CHUNK))
    {
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let o = images_to_tensor(&refs, dtype)?;
        let y = Tensor::stack(
            &masks.iter().map(|m| m.values().clone()).collect::<Vec<_>>(),
            0,
        )?
        .to_dtype(dtype)?;
        let out = models
            .refiner
            .sample_batch(&y, &o, n_steps, mode, &mut rng)?
            .to_dtype(DType::F32)?;
        for i in 0..imgs.len() {
            refined.push(ProbMask::new(out.get(i)?, MaskKind::Refined)?);
        }
    }
    let refined_map = merge_regions(&refined, &grid)?;
    Ok(SlidePrediction {
        coarse: coarse_map,
        refined: refined_map,
    })
}

/// Output raster paths of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub name: String,
    pub coarse: PathBuf,
    pub refined: PathBuf,
}

fn slide_name(path: &Path) -> Result<String> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))
}

/// Writes coarse and refined rasters for one given slide image, or for every
/// held-out slide when `wsi` is `None`.
pub fn cmd_infer(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    threads: usize,
    wsi: Option<&Path>,
) -> Result<Vec<InferOutput>> {
    cfg.validate()?;
    let models = load_models(ws)?;
    let jobs: Vec<(String, PathBuf)> = match wsi {
        Some(p) => {
            require(p)?;
            vec![(slide_name(p)?, p.to_path_buf())]
        }
        None => EvalManifest::load(&ws.eval_manifest())?
            .slides
            .into_iter()
            .map(|s| (s.name, ws.eval_dir().join(s.image)))
            .collect(),
    };
    ws.create()?;
    let mut rec = StageRecorder::start(ws, "infer", cfg)?;
    let r = &cfg.refiner;
    let pool = worker_pool(threads)?;
    let outputs = pool.install(|| {
        jobs.par_iter()
            .map(|(name, path)| {
                let image = image::open(path)?.to_rgb8();
                let seed = derive_seed(cfg.seed, &format!("sample:{name}"), 0);
                let pred = predict_slide(
                    &models,
                    &image,
                    cfg.geometry.region,
                    r.n_steps,
                    r.mode,
                    seed,
                )?;
                let out = InferOutput {
                    name: name.clone(),
                    coarse: ws.coarse_raster(name),
                    refined: ws.refined_raster(name),
                };
                pred.coarse.save(&out.coarse)?;
                pred.refined.save(&out.refined)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    for o in &outputs {
        rec.artifact(&o.coarse)?;
        rec.artifact(&o.refined)?;
    }
    rec.finish()?;
    Ok(outputs)
}
