use candle_core::{DType, IndexOp, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{LoraAdapter, LoraLinear};
use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{layer_norm, linear, normal, ones, zeros, Param};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyVitConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub token_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl Default for TinyVitConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            in_channels: 3,
            token_size: 4,
            embed_dim: 32,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            n_classes: NUM_CLASSES,
        }
    }
}

impl TinyVitConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.in_channels,
            self.token_size,
            self.embed_dim,
            self.layers,
            self.heads,
            self.mlp_ratio,
            self.n_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(
                "classifier dimensions must be positive".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.token_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by token size {}",
                self.image_size, self.token_size
            )));
        }
        if self.n_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "classifier must emit {NUM_CLASSES} logits"
            )));
        }
        Ok(())
    }

    pub fn tokens_per_side(&self) -> usize {
        self.image_size / self.token_size
    }

    pub fn token_dim(&self) -> usize {
        self.token_size * self.token_size * self.in_channels
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_g: Param,
    pub ln1_b: Param,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub ln2_g: Param,
    pub ln2_b: Param,
    pub fc1_w: Param,
    pub fc1_b: Param,
    pub fc2_w: Param,
    pub fc2_b: Param,
}

impl Block {
    fn new(i: usize, cfg: &TinyVitConfig, rng: &mut impl Rng, dtype: DType) -> Result<Self> {
        let d = cfg.embed_dim;
        let hidden = d * cfg.mlp_ratio;
        let p = |s: &str| format!("blocks.{i}.{s}");
        Ok(Self {
            ln1_g: Param::new(p("ln1.gamma"), ones(&[d], dtype)?)?,
            ln1_b: Param::new(p("ln1.beta"), zeros(&[d], dtype)?)?,
            q: LoraLinear::new(&p("attn.q"), d, d, rng, dtype)?,
            k: LoraLinear::new(&p("attn.k"), d, d, rng, dtype)?,
            v: LoraLinear::new(&p("attn.v"), d, d, rng, dtype)?,
            o: LoraLinear::new(&p("attn.o"), d, d, rng, dtype)?,
            ln2_g: Param::new(p("ln2.gamma"), ones(&[d], dtype)?)?,
            ln2_b: Param::new(p("ln2.beta"), zeros(&[d], dtype)?)?,
            fc1_w: Param::new(
                p("mlp.fc1.weight"),
                normal(rng, &[hidden, d], 1.0 / (d as f64).sqrt(), dtype)?,
            )?,
            fc1_b: Param::new(p("mlp.fc1.bias"), zeros(&[hidden], dtype)?)?,
            fc2_w: Param::new(
                p("mlp.fc2.weight"),
                normal(rng, &[d, hidden], 1.0 / (hidden as f64).sqrt(), dtype)?,
            )?,
            fc2_b: Param::new(p("mlp.fc2.bias"), zeros(&[d], dtype)?)?,
        })
    }

    fn projections(&self) -> [&LoraLinear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    fn projections_mut(&mut self) -> [&mut LoraLinear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    fn base_params(&self) -> Vec<&Param> {
        let mut out = vec![&self.ln1_g, &self.ln1_b];
        for proj in self.projections() {
            out.push(&proj.weight);
            out.push(&proj.bias);
        }
        out.extend([
            &self.ln2_g,
            &self.ln2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]);
        out
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        let hd = d / heads;
        let h = layer_norm(x, &self.ln1_g.t(), &self.ln1_b.t(), LN_EPS)?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((n, t, heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let att = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, candle_core::D::Minus1)?;
        let ctx = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, t, d))?;
        let x = (x + self.o.forward(&ctx)?)?;
        let h = layer_norm(&x, &self.ln2_g.t(), &self.ln2_b.t(), LN_EPS)?;
        let h = linear(&h, &self.fc1_w.t(), Some(&self.fc1_b.t()))?.gelu_erf()?;
        let h = linear(&h, &self.fc2_w.t(), Some(&self.fc2_b.t()))?;
        Ok((x + h)?)
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Base,
    Head,
    Adapter,
}

/// Tiny vision transformer over 4×4 tokens with a class token.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub config: TinyVitConfig,
    pub patch_w: Param,
    pub patch_b: Param,
    pub cls: Param,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_g: Param,
    pub ln_b: Param,
    pub head_w: Param,
    pub head_b: Param,
    pub lora_rank: Option<usize>,
}

/// Seeded initialization.
pub fn init_classifier(config: &TinyVitConfig, seed: u64, dtype: DType) -> Result<ClassifierModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let n_tokens = config.tokens_per_side().pow(2) + 1;
    let td = config.token_dim();
    Ok(ClassifierModel {
        config: config.clone(),
        patch_w: Param::new(
            "patch.weight",
            normal(&mut rng, &[d, td], 1.0 / (td as f64).sqrt(), dtype)?,
        )?,
        patch_b: Param::new("patch.bias", zeros(&[d], dtype)?)?,
        cls: Param::new("cls_token", normal(&mut rng, &[1, 1, d], 0.02, dtype)?)?,
        pos: Param::new(
            "pos_embed",
            normal(&mut rng, &[1, n_tokens, d], 0.02, dtype)?,
        )?,
        blocks: (0..config.layers)
            .map(|i| Block::new(i, config, &mut rng, dtype))
            .collect::<Result<_>>()?,
        ln_g: Param::new("ln.gamma", ones(&[d], dtype)?)?,
        ln_b: Param::new("ln.beta", zeros(&[d], dtype)?)?,
        head_w: Param::new(
            "head.weight",
            normal(
                &mut rng,
                &[config.n_classes, d],
                1.0 / (d as f64).sqrt(),
                dtype,
            )?,
        )?,
        head_b: Param::new("head.bias", zeros(&[config.n_classes], dtype)?)?,
        lora_rank: None,
    })
}

impl ClassifierModel {
    pub fn dtype(&self) -> DType {
        self.patch_w.var.dtype()
    }

    /// Logits `(N, C)` for an image batch `(N, 3, S, S)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (n, c, h, w) = images.dims4()?;
        if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects (N, {}, {s}, {s}), got {:?}",
                cfg.in_channels,
                images.dims(),
                s = cfg.image_size
            )));
        }
        let g = cfg.tokens_per_side();
        let ts = cfg.token_size;
        let tokens = images
            .reshape((n, c, g, ts, g, ts))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((n, g * g, cfg.token_dim()))?;
        let x = linear(&tokens, &self.patch_w.t(), Some(&self.patch_b.t()))?;
        let cls = self.cls.t().broadcast_as((n, 1, cfg.embed_dim))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos.t())?;
        for block in &self.blocks {
            x = block.forward(&x, cfg.heads)?;
        }
        let x = layer_norm(&x, &self.ln_g.t(), &self.ln_b.t(), LN_EPS)?;
        let cls_out = x.i((.., 0, ..))?;
        linear(&cls_out, &self.head_w.t(), Some(&self.head_b.t()))
    }

    /// Every parameter with its role, in a fixed order.
    pub fn params(&self) -> Vec<(&Param, ParamRole)> {
        let mut out: Vec<(&Param, ParamRole)> =
            [&self.patch_w, &self.patch_b, &self.cls, &self.pos]
                .into_iter()
                .map(|p| (p, ParamRole::Base))
                .collect();
        for b in &self.blocks {
            out.extend(b.base_params().into_iter().map(|p| (p, ParamRole::Base)));
        }
        out.push((&self.ln_g, ParamRole::Base));
        out.push((&self.ln_b, ParamRole::Base));
        out.push((&self.head_w, ParamRole::Head));
        out.push((&self.head_b, ParamRole::Head));
        for ad in self.adapters() {
            out.extend(ad.params().into_iter().map(|p| (p, ParamRole::Adapter)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls,
            &mut self.pos,
        ];
        for b in &mut self.blocks {
            out.extend([&mut b.ln1_g, &mut b.ln1_b]);
            for proj in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                out.extend([&mut proj.weight, &mut proj.bias]);
                if let Some(ad) = proj.adapter.as_mut() {
                    out.extend([&mut ad.b, &mut ad.a]);
                }
            }
            out.extend([
                &mut b.ln2_g,
                &mut b.ln2_b,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ]);
        }
        out.extend([
            &mut self.ln_g,
            &mut self.ln_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn params_with_role(&self, role: ParamRole) -> Vec<&Param> {
        self.params()
            .into_iter()
            .filter(|(_, r)| *r == role)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn frozen_params(&self) -> Vec<&Param> {
        self.params()
            .into_iter()
            .filter(|(p, _)| p.frozen)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn trainable_params(&self) -> Vec<&Param> {
        self.params()
            .into_iter()
            .filter(|(p, _)| !p.frozen)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn adapters(&self) -> Vec<&LoraAdapter> {
        self.blocks
            .iter()
            .flat_map(|b| {
                b.projections()
                    .into_iter()
                    .filter_map(|p| p.adapter.as_ref())
            })
            .collect()
    }

    /// Attention projections in block order (q, k, v, o per block).
    pub fn projections(&self) -> Vec<&LoraLinear> {
        self.blocks.iter().flat_map(|b| b.projections()).collect()
    }

    /// Marks every base parameter frozen; the head stays trainable.
    pub fn freeze_base(&mut self) {
        let head = [self.head_w.name.clone(), self.head_b.name.clone()];
        for p in self.params_mut() {
            if !head.contains(&p.name) && !p.name.contains(".lora_") {
                p.frozen = true;
            }
        }
    }

    pub fn is_base_frozen(&self) -> bool {
        self.params_with_role(ParamRole::Base)
            .iter()
            .all(|p| p.frozen)
    }

    pub fn frozen_checksum(&self) -> Result<String> {
        crate::nn::params_checksum(self.frozen_params())
    }

    /// Attaches rank-`rank` adapters to every attention projection.
    pub fn inject_lora(&mut self, rank: usize, seed: u64) -> Result<()> {
        if !self.is_base_frozen() {
            return Err(Error::InvalidArgument(
                "inject_lora needs a frozen base".into(),
            ));
        }
        if self.lora_rank.is_some() {
            return Err(Error::InvalidArgument("adapters already attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            for proj in block.projections_mut() {
                proj.attach(rank, &mut rng)?;
            }
        }
        self.lora_rank = Some(rank);
        Ok(())
    }
}
