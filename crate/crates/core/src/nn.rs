//! Small building blocks shared by the classifier and the refiner networks.

use candle_core::{DType, Device, Tensor, Var, D};
use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor_file::TensorRecord;

/// A named trainable tensor. Frozen parameters are fed to the graph
/// detached, so no gradient is ever produced for them.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            var: Var::from_tensor(&tensor)?,
            frozen: false,
        })
    }

    /// The value as a graph input.
    pub fn t(&self) -> Tensor {
        if self.frozen {
            self.var.as_detached_tensor()
        } else {
            self.var.as_tensor().clone()
        }
    }

    pub fn numel(&self) -> usize {
        self.var.elem_count()
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord::new(self.name.clone(), self.var.as_detached_tensor()).frozen(self.frozen)
    }

    /// Overwrites the value, keeping shape and dtype.
    pub fn assign(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.var.dims() {
            return Err(Error::ShapeMismatch(format!(
                "{}: stored {:?}, assigned {:?}",
                self.name,
                self.var.dims(),
                value.dims()
            )));
        }
        self.var.set(&value.to_dtype(self.var.dtype())?)?;
        Ok(())
    }
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn zeros(shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, dtype, &Device::Cpu)?)
}

pub fn ones(shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::ones(shape, dtype, &Device::Cpu)?)
}

/// `x · wᵀ + b` over the last dimension; `w` is `(out, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Layer normalization over the last dimension.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// 2-D convolution with a per-channel bias and "same" padding for odd kernels.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let k = w.dim(2)?;
    let y = x.conv2d(w, k / 2, 1, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?)
}

/// Nearest-neighbor upsampling by an integer factor, written with broadcasts
/// so its gradient accumulates correctly when the input has several consumers.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, factor, w, factor))?
        .reshape((n, c, h * factor, w * factor))?)
}

/// Stacks RGB images into an `(N, 3, H, W)` tensor scaled to roughly unit range.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("image batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} in a batch of {:?}",
                img.dimensions(),
                (w, h)
            )));
        }
        let raw = img.as_raw();
        for ch in 0..3 {
            data.extend((0..plane).map(|i| (raw[i * 3 + ch] as f32 / 255.0 - 0.5) / 0.25));
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), 3, h as usize, w as usize),
        &Device::Cpu,
    )?
    .to_dtype(dtype)?)
}

/// SHA-256 over the names and little-endian bytes of the given parameters.
pub fn params_checksum<'a>(params: impl IntoIterator<Item = &'a Param>) -> Result<String> {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        let flat = p.var.as_detached_tensor().flatten_all()?;
        match flat.dtype() {
            DType::F64 => flat
                .to_vec1::<f64>()?
                .iter()
                .for_each(|v| h.update(v.to_le_bytes())),
            _ => flat
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| h.update(v.to_le_bytes())),
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Scalar value of a 0-d tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsample_matches_builtin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal(&mut rng, &[2, 3, 4, 5], 1.0, DType::F32).unwrap();
        let a = upsample_nearest(&x, 2).unwrap();
        let b = x.upsample_nearest2d(8, 10).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let y = layer_norm(
            &x,
            &ones(&[4], DType::F64).unwrap(),
            &zeros(&[4], DType::F64).unwrap(),
            0.0,
        )
        .unwrap();
        let v = y.to_vec2::<f64>().unwrap()[0].clone();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_param_is_detached() {
        let mut p = Param::new("w", Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap()).unwrap();
        let loss = p.t().sqr().unwrap().sum_all().unwrap();
        assert!(loss.backward().unwrap().get(&p.var).is_some());
        p.frozen = true;
        let loss = p.t().sqr().unwrap().sum_all().unwrap();
        assert!(loss.backward().unwrap().get(&p.var).is_none());
    }
}
