//! Brownian-bridge diffusion refiner: transports coarse masks to clean ones,
//! conditioned on the tissue image.

pub mod bridge;
pub mod network;
mod sample;
pub mod schedule;

use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use bridge::{
    bridge_state, channel_softmax, forward_sample, forward_sample_tensor, noise_target,
    reconstruct_x0, reconstruct_x0_from_residual, segmentation_loss, standard_normal,
    transition_loss,
};
pub use network::{ConditionEncoder, Denoiser, NetworkConfig};
pub use sample::{reverse_bridge, SampleMode};
pub use schedule::{BridgeSchedule, PosteriorCoefs};

use crate::error::{Error, Result};
use crate::nn::{scalar, Param};
use crate::tensor_file::TensorFile;
use crate::tiling::{MaskKind, ProbMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub steps: usize,
    pub s: f64,
    pub lambda: f64,
    pub network: NetworkConfig,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            s: 1.0,
            lambda: 1.0,
            network: NetworkConfig::default(),
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        BridgeSchedule::new(self.steps, self.s).map_err(|e| Error::Config(e.to_string()))?;
        self.network.validate()
    }
}

#[derive(Debug, Clone)]
pub struct RefinerState {
    pub schedule: BridgeSchedule,
    pub encoder: ConditionEncoder,
    pub denoiser: Denoiser,
    pub lambda: f64,
    pub seed: u64,
    pub config: RefinerConfig,
}

/// One training batch: clean one-hot masks, coarse masks and tissue images.
#[derive(Debug, Clone)]
pub struct RefinerBatch {
    /// `(N, C, h, w)`.
    pub x0: Tensor,
    /// `(N, C, h, w)`.
    pub y: Tensor,
    /// `(N, 3, h, w)`.
    pub o: Tensor,
}

impl RefinerBatch {
    pub fn len(&self) -> usize {
        self.x0.dims().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            x0: self.x0.to_dtype(dtype)?,
            y: self.y.to_dtype(dtype)?,
            o: self.o.to_dtype(dtype)?,
        })
    }
}

/// Loss values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinerLosses {
    pub total: f64,
    pub transition: f64,
    pub segmentation: f64,
}

pub fn init_refiner(config: &RefinerConfig, seed: u64, dtype: DType) -> Result<RefinerState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(RefinerState {
        schedule: BridgeSchedule::new(config.steps, config.s)?,
        encoder: ConditionEncoder::new(&config.network, &mut rng, dtype)?,
        denoiser: Denoiser::new(&config.network, &mut rng, dtype)?,
        lambda: config.lambda,
        seed,
        config: config.clone(),
    })
}

impl RefinerState {
    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.denoiser.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.denoiser.params_mut());
        out
    }

    pub fn dtype(&self) -> DType {
        self.denoiser.output.w.var.dtype()
    }

    pub fn numel(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Residual prediction for a batch sharing conditioning features.
    pub fn predict(&self, xt: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let fractions: Vec<f64> = steps.iter().map(|&t| self.schedule.m[t]).collect();
        self.denoiser.forward(xt, cond, &fractions)
    }

    /// The objective at given steps and noise, as a graph node plus its parts.
    pub fn loss(
        &self,
        batch: &RefinerBatch,
        steps: &[usize],
        eps: &Tensor,
    ) -> Result<(Tensor, RefinerLosses)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Empty("refiner batch".into()));
        }
        if steps.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} steps for {n} samples",
                steps.len()
            )));
        }
        let mut xts = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for (i, &t) in steps.iter().enumerate() {
            let (x0, y, e) = (batch.x0.get(i)?, batch.y.get(i)?, eps.get(i)?);
            xts.push(bridge_state(&x0, &y, &e, t, &self.schedule)?);
            targets.push(noise_target(&x0, &y, &e, t, &self.schedule)?);
        }
        let xt = Tensor::stack(&xts, 0)?;
        let target = Tensor::stack(&targets, 0)?;
        let cond = self.encoder.forward(&batch.y, &batch.o)?;
        let pred = self.predict(&xt, &cond, steps)?;
        let l_trans = transition_loss(&pred, &target)?;
        let x0_hat = reconstruct_x0_from_residual(&xt, &pred)?;
        let l_seg = segmentation_loss(&x0_hat, &batch.x0)?;
        let total = (&l_trans + (&l_seg * self.lambda)?)?;
        let (transition, segmentation) = (scalar(&l_trans)?, scalar(&l_seg)?);
        let losses = RefinerLosses {
            total: transition + self.lambda * segmentation,
            transition,
            segmentation,
        };
        if !losses.total.is_finite() {
            return Err(Error::Numerical(format!(
                "refiner loss {losses:?} at steps {steps:?}"
            )));
        }
        Ok((total, losses))
    }

    /// Conditioning features for `y` and `o`.
    pub fn condition(&self, y: &Tensor, o: &Tensor) -> Result<Tensor> {
        Ok(self.encoder.forward(y, o)?.detach())
    }

    /// Refined probabilities `(N, C, h, w)` for a batch of coarse masks.
    pub fn sample_batch(
        &self,
        y: &Tensor,
        o: &Tensor,
        n_steps: usize,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let cond = self.condition(y, o)?;
        let n = y.dim(0)?;
        let predict = |xt: &Tensor, t: usize| Ok(self.predict(xt, &cond, &vec![t; n])?.detach());
        let x0_hat = reverse_bridge(predict, y, &self.schedule, n_steps, mode, rng)?;
        channel_softmax(&x0_hat)
    }
}

/// Draws a step in `1..T` and a noise field per sample.
pub fn draw_steps_and_noise(
    sched: &BridgeSchedule,
    like: &Tensor,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Tensor)> {
    let n = like.dim(0)?;
    let steps = (0..n).map(|_| rng.random_range(1..sched.steps)).collect();
    Ok((steps, standard_normal(rng, like)?))
}

/// Adam over the encoder and denoiser.
pub struct RefinerTrainer {
    opt: AdamW,
}

impl RefinerTrainer {
    pub fn new(state: &RefinerState, lr: f64) -> Result<Self> {
        let vars = state.params().iter().map(|p| p.var.clone()).collect();
        Ok(Self {
            opt: AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?,
        })
    }
}

/// Samples steps and noise, then takes one optimizer step on the objective.
pub fn refiner_train_step(
    state: &RefinerState,
    trainer: &mut RefinerTrainer,
    batch: &RefinerBatch,
    rng: &mut impl Rng,
) -> Result<RefinerLosses> {
    let (steps, eps) = draw_steps_and_noise(&state.schedule, &batch.x0, rng)?;
    let (loss, parts) = state.loss(batch, &steps, &eps)?;
    trainer.opt.backward_step(&loss)?;
    Ok(parts)
}

/// Refines a single coarse mask; `o` is the `(3, h, w)` tissue image.
pub fn sample_refined(
    state: &RefinerState,
    y: &ProbMask,
    o: &Tensor,
    n_steps: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<ProbMask> {
    let dtype = state.dtype();
    let yb = y.values().to_dtype(dtype)?.unsqueeze(0)?;
    let ob = o.to_dtype(dtype)?.unsqueeze(0)?;
    let out = state
        .sample_batch(&yb, &ob, n_steps, mode, rng)?
        .squeeze(0)?;
    ProbMask::new(out.to_dtype(DType::F32)?, MaskKind::Refined)
}

const CHECKPOINT_KIND: &str = "refiner";

pub fn save_refiner(state: &RefinerState, path: &Path) -> Result<()> {
    let mut file = TensorFile::new(json!({
        "kind": CHECKPOINT_KIND,
        "config": state.config,
        "schedule": state.schedule,
        "seed": state.seed,
        "dtype": format!("{:?}", state.dtype()),
    }));
    for p in state.params() {
        file.push(p.to_record());
    }
    file.save(path)
}

pub fn load_refiner(path: &Path) -> Result<RefinerState> {
    let file = TensorFile::load(path)?;
    let meta = &file.meta;
    if meta.get("kind").and_then(|v| v.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(Error::TensorFile(format!(
            "{} is not a refiner checkpoint",
            path.display()
        )));
    }
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::TensorFile(format!("missing '{k}'")))
    };
    let config: RefinerConfig = serde_json::from_value(field("config")?)?;
    let schedule: BridgeSchedule = serde_json::from_value(field("schedule")?)?;
    let seed = field("seed")?
        .as_u64()
        .ok_or_else(|| Error::TensorFile("bad seed".into()))?;
    let dtype = match field("dtype")?.as_str() {
        Some("F64") => DType::F64,
        _ => DType::F32,
    };
    let mut state = init_refiner(&config, seed, dtype)?;
    state.schedule = schedule;
    for p in state.params_mut() {
        p.assign(file.tensor(&p.name)?)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use candle_core::Device;

    fn tiny(dtype: DType, lambda: f64) -> RefinerState {
        let cfg = RefinerConfig {
            steps: 20,
            s: 1.0,
            lambda,
            network: NetworkConfig {
                cond_width: 4,
                base_width: 6,
                stem: 2,
            },
        };
        init_refiner(&cfg, 5, dtype).unwrap()
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, h: usize, dtype: DType) -> RefinerBatch {
        let labels: Vec<usize> = (0..n * h * h).map(|_| rng.random_range(0..7)).collect();
        let mut x0 = vec![0.0; n * 7 * h * h];
        for (i, &c) in labels.iter().enumerate() {
            let (b, p) = (i / (h * h), i % (h * h));
            x0[b * 7 * h * h + c * h * h + p] = 1.0;
        }
        let x0 = Tensor::from_vec(x0, (n, 7, h, h), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap();
        let y =
            candle_nn::ops::softmax(&normal(rng, &[n, 7, h, h], 1.0, dtype).unwrap(), 1).unwrap();
        let o = normal(rng, &[n, 3, h, h], 1.0, dtype).unwrap();
        RefinerBatch { x0, y, o }
    }

    #[test]
    fn loss_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = batch(&mut rng, 2, 8, DType::F64);
        let (steps, eps) =
            draw_steps_and_noise(&tiny(DType::F64, 0.0).schedule, &b.x0, &mut rng).unwrap();
        let (_, l0) = tiny(DType::F64, 0.0).loss(&b, &steps, &eps).unwrap();
        assert_eq!(l0.total, l0.transition);
        let (g, l1) = tiny(DType::F64, 1.0).loss(&b, &steps, &eps).unwrap();
        assert_eq!(l1.total, l1.transition + l1.segmentation);
        assert!((scalar(&g).unwrap() - l1.total).abs() < 1e-12);
        assert!(l1.segmentation >= 0.0);
    }

    #[test]
    fn training_reduces_loss_on_a_fixed_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = tiny(DType::F32, 1.0);
        let b = batch(&mut rng, 2, 8, DType::F32);
        let (steps, eps) = draw_steps_and_noise(&state.schedule, &b.x0, &mut rng).unwrap();
        let before = state.loss(&b, &steps, &eps).unwrap().1.total;
        let mut trainer = RefinerTrainer::new(&state, 1e-2).unwrap();
        for _ in 0..30 {
            refiner_train_step(&state, &mut trainer, &b, &mut rng).unwrap();
        }
        let after = state.loss(&b, &steps, &eps).unwrap().1.total;
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn ddim_sampling_is_deterministic_and_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let state = tiny(DType::F32, 1.0);
        let b = batch(&mut rng, 1, 16, DType::F32);
        let y = ProbMask::new(b.y.squeeze(0).unwrap(), MaskKind::Coarse).unwrap();
        let o = b.o.squeeze(0).unwrap();
        let a = sample_refined(
            &state,
            &y,
            &o,
            5,
            SampleMode::Ddim,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let c = sample_refined(
            &state,
            &y,
            &o,
            5,
            SampleMode::Ddim,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let v = |m: &ProbMask| m.values().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&a), v(&c));
        assert_eq!(a.values().dims(), &[7, 16, 16]);
        a.check_simplex(1e-5).unwrap();
        assert!(sample_refined(&state, &y, &o, 0, SampleMode::Ddim, &mut rng).is_err());
        assert!(sample_refined(&state, &y, &o, 21, SampleMode::Ddim, &mut rng).is_err());
        let anc = sample_refined(&state, &y, &o, 20, SampleMode::Ancestral, &mut rng).unwrap();
        anc.check_simplex(1e-5).unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refiner.tnsr");
        let state = tiny(DType::F32, 0.5);
        save_refiner(&state, &path).unwrap();
        let back = load_refiner(&path).unwrap();
        assert_eq!(back.schedule, state.schedule);
        assert_eq!(back.lambda, 0.5);
        let a = crate::nn::params_checksum(state.params()).unwrap();
        assert_eq!(a, crate::nn::params_checksum(back.params()).unwrap());
    }
}
