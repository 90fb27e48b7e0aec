//! Low-rank adapters on frozen linear maps.
//!
//! A wrapped map computes `x (W + B A)ᵀ + b` with `W: d×k` frozen,
//! `B: d×r` zero-initialized and `A: r×k` Gaussian, so attaching an adapter
//! leaves every output unchanged until `B` moves.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{linear, normal, zeros, Param};

/// Standard deviation of the Gaussian initialization of `A`.
pub const LORA_A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// `d × r`.
    pub b: Param,
    /// `r × k`.
    pub a: Param,
    pub rank: usize,
    /// Name of the frozen matrix this adapter updates.
    pub base: String,
}

impl LoraAdapter {
    pub fn new(base: &Param, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        let (d, k) = base.var.dims2()?;
        if rank == 0 || rank > d.min(k) {
            return Err(Error::InvalidArgument(format!(
                "LoRA rank {rank} outside 1..={} for a {d}x{k} matrix",
                d.min(k)
            )));
        }
        let dtype = base.var.dtype();
        Ok(Self {
            b: Param::new(format!("{}.lora_b", base.name), zeros(&[d, rank], dtype)?)?,
            a: Param::new(
                format!("{}.lora_a", base.name),
                normal(rng, &[rank, k], LORA_A_INIT_STD, dtype)?,
            )?,
            rank,
            base: base.name.clone(),
        })
    }

    /// `ΔW = B · A`, shape `d × k`.
    pub fn delta(&self) -> Result<Tensor> {
        Ok(self.b.var.as_tensor().matmul(self.a.var.as_tensor())?)
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.b, &self.a]
    }

    pub fn numel(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Linear map with an optional low-rank adapter.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub weight: Param,
    pub bias: Param,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn new(
        name: &str,
        d_out: usize,
        d_in: usize,
        rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: Param::new(
                format!("{name}.weight"),
                normal(rng, &[d_out, d_in], std, dtype)?,
            )?,
            bias: Param::new(format!("{name}.bias"), zeros(&[d_out], dtype)?)?,
            adapter: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = linear(x, &self.weight.t(), Some(&self.bias.t()))?;
        match &self.adapter {
            None => Ok(y),
            Some(ad) => {
                let low = linear(&linear(x, &ad.a.t(), None)?, &ad.b.t(), None)?;
                Ok((y + low)?)
            }
        }
    }

    pub fn attach(&mut self, rank: usize, rng: &mut impl Rng) -> Result<()> {
        self.adapter = Some(LoraAdapter::new(&self.weight, rank, rng)?);
        Ok(())
    }

    /// `W + B A`, or `W` without an adapter.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let w = self.weight.var.as_detached_tensor();
        match &self.adapter {
            None => Ok(w),
            Some(ad) => Ok((w + ad.delta()?)?),
        }
    }
}
