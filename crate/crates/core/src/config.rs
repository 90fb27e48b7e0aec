//! Experiment configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classes::{reference_class_freqs, validate_freqs};
use crate::classifier::TinyVitConfig;
use crate::error::{Error, Result};
use crate::refiner::{NetworkConfig, RefinerConfig, SampleMode};
use crate::synthgen::{region_exponent, GeneratorParams, SplitFractions, TextureParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub patch: usize,
    pub region: usize,
    /// Side of every generated slide.
    pub wsi: usize,
    /// `region = patch · 2^k`.
    pub k: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub class_freqs: Vec<f64>,
    pub cell_size: usize,
    pub smooth_radius: usize,
    pub warp_amplitude: f64,
    pub target_texture: TextureParams,
    pub source_texture: TextureParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Slides in the shifted family used to pretrain the classifier base.
    pub source_wsis: usize,
    /// Target-family slides cut into patch and region datasets.
    pub train_wsis: usize,
    /// Held-out target-family slides for inference and evaluation.
    pub eval_wsis: usize,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub model: TinyVitConfig,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub rank: usize,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerSection {
    pub steps: usize,
    pub s: f64,
    pub lambda: f64,
    pub n_steps: usize,
    pub mode: SampleMode,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Side of the random square crops the refiner trains on.
    pub crop: usize,
    pub network: NetworkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub workspace: PathBuf,
    pub data: String,
    pub models: String,
    pub outputs: String,
    pub reports: String,
    pub cache: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub geometry: GeometryConfig,
    pub generator: GeneratorConfig,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub refiner: RefinerSection,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gen = GeneratorParams::default();
        Self {
            seed: 0,
            geometry: GeometryConfig {
                patch: 16,
                region: 128,
                wsi: 512,
                k: 3,
            },
            generator: GeneratorConfig {
                class_freqs: reference_class_freqs().to_vec(),
                cell_size: gen.cell_size,
                smooth_radius: gen.smooth_radius,
                warp_amplitude: gen.warp_amplitude,
                target_texture: TextureParams::target(),
                source_texture: TextureParams::source(),
            },
            data: DataConfig {
                source_wsis: 2,
                train_wsis: 3,
                eval_wsis: 2,
                splits: SplitFractions::default().0,
            },
            classifier: ClassifierConfig {
                model: TinyVitConfig::default(),
                pretrain_epochs: 6,
                pretrain_lr: 1e-3,
                rank: 4,
                eta: 1e-2,
                epochs: 6,
                batch_size: 64,
            },
            refiner: RefinerSection {
                steps: 200,
                s: 1.0,
                lambda: 1.0,
                n_steps: 20,
                mode: SampleMode::Ddim,
                train_steps: 600,
                batch_size: 4,
                lr: 1e-3,
                crop: 64,
                network: NetworkConfig::default(),
            },
            paths: PathsConfig {
                workspace: PathBuf::from("workspace"),
                data: "data".into(),
                models: "models".into(),
                outputs: "outputs".into(),
                reports: "reports".into(),
                cache: "cache".into(),
            },
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let k = region_exponent(g.region, g.patch).map_err(|e| config_err(e.to_string()))?;
        if k != g.k {
            return Err(config_err(format!(
                "region {} = patch {} * 2^{k}, but k = {}",
                g.region, g.patch, g.k
            )));
        }
        if g.wsi < g.region {
            return Err(config_err(format!(
                "slide side {} is smaller than a region",
                g.wsi
            )));
        }
        validate_freqs(&self.generator.class_freqs).map_err(|e| config_err(e.to_string()))?;
        if self.generator.cell_size == 0 {
            return Err(config_err("cell_size must be positive"));
        }
        SplitFractions(self.data.splits)
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        if self.data.source_wsis == 0 || self.data.train_wsis == 0 || self.data.eval_wsis == 0 {
            return Err(config_err("every slide count must be positive"));
        }
        let c = &self.classifier;
        c.model.validate()?;
        if c.model.image_size != g.patch {
            return Err(config_err(format!(
                "classifier input {} differs from the patch size {}",
                c.model.image_size, g.patch
            )));
        }
        let d = c.model.embed_dim;
        if c.rank == 0 || c.rank > d {
            return Err(config_err(format!("LoRA rank {} outside 1..={d}", c.rank)));
        }
        if c.batch_size == 0 || !(c.eta >= 0.0) || !(c.pretrain_lr > 0.0) {
            return Err(config_err(
                "classifier batch size, eta and lr must be positive",
            ));
        }
        let r = &self.refiner;
        self.refiner_config().validate()?;
        if r.n_steps == 0 || r.n_steps > r.steps {
            return Err(config_err(format!(
                "n_steps {} outside 1..={}",
                r.n_steps, r.steps
            )));
        }
        if r.batch_size == 0 || !(r.lr > 0.0) {
            return Err(config_err("refiner batch size and lr must be positive"));
        }
        let unit = r.network.size_unit();
        if r.crop == 0 || r.crop > g.region || !r.crop.is_multiple_of(unit) || !g.region.is_multiple_of(unit) {
            return Err(config_err(format!(
                "crop {} must divide into the region {} in multiples of {unit}",
                r.crop, g.region
            )));
        }
        let p = &self.paths;
        for (name, dir) in [
            ("data", &p.data),
            ("models", &p.models),
            ("outputs", &p.outputs),
            ("reports", &p.reports),
            ("cache", &p.cache),
        ] {
            if dir.is_empty() || Path::new(dir).is_absolute() || dir.contains("..") {
                return Err(config_err(format!(
                    "paths.{name} must be a relative directory name"
                )));
            }
        }
        Ok(())
    }

    pub fn generator_params(&self, texture: &TextureParams) -> GeneratorParams {
        GeneratorParams {
            cell_size: self.generator.cell_size,
            smooth_radius: self.generator.smooth_radius,
            warp_amplitude: self.generator.warp_amplitude,
            texture: texture.clone(),
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            steps: self.refiner.steps,
            s: self.refiner.s,
            lambda: self.refiner.lambda,
            network: self.refiner.network,
        }
    }
}
