//! Condition encoder and the two-level U-Net denoiser.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, normal, upsample_nearest, zeros, Param};

/// Length of the sinusoidal timestep code.
pub const TIME_CODE_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Channels of the conditioning features.
    pub cond_width: usize,
    /// Channels at the upper level; the lower level uses twice that.
    pub base_width: usize,
    /// Side of the pixel blocks folded into channels before the first
    /// convolution and unfolded after the last (1, 2 or 4).
    pub stem: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            cond_width: 16,
            base_width: 32,
            stem: 2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cond_width == 0 || self.base_width == 0 {
            return Err(Error::Config("refiner widths must be positive".into()));
        }
        if ![1, 2, 4].contains(&self.stem) {
            return Err(Error::Config(format!(
                "stem must be 1, 2 or 4, got {}",
                self.stem
            )));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_unit(&self) -> usize {
        2 * self.stem
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: Param,
    pub b: Param,
}

impl Conv {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        let std = (1.0 / (cin * k * k) as f64).sqrt();
        Ok(Self {
            w: Param::new(
                format!("{name}.weight"),
                normal(rng, &[cout, cin, k, k], std, dtype)?,
            )?,
            b: Param::new(format!("{name}.bias"), zeros(&[cout], dtype)?)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.w.t(), &self.b.t())
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

/// Three 3×3 convolutions over the coarse mask stacked with the tissue image,
/// at the stem resolution.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub convs: [Conv; 3],
    pub stem: usize,
}

/// Mean over `f × f` blocks.
pub fn box_downsample(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} is not divisible by {f}"
        )));
    }
    Ok(x.reshape((n, c, h / f, f, w / f, f))?.mean(5)?.mean(3)?)
}

/// `(N, C, h, w)` to `(N, C·f², h/f, w/f)`; channel `c·f² + i·f + j` holds
/// pixel `(i, j)` of each block.
pub fn pixel_unshuffle(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} is not divisible by {f}"
        )));
    }
    Ok(x.reshape((n, c, h / f, f, w / f, f))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((n, c * f * f, h / f, w / f))?)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 1 {
        return Ok(x.clone());
    }
    let (n, cf, h, w) = x.dims4()?;
    if cf % (f * f) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{cf} channels do not fold by {f}"
        )));
    }
    let c = cf / (f * f);
    Ok(x.reshape((n, c, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((n, c, h * f, w * f))?)
}

impl ConditionEncoder {
    pub fn new(cfg: &NetworkConfig, rng: &mut impl Rng, dtype: DType) -> Result<Self> {
        let f = cfg.cond_width;
        let cin = (NUM_CLASSES + 3) * cfg.stem * cfg.stem;
        Ok(Self {
            convs: [
                Conv::new("encoder.conv0", cin, f, 3, rng, dtype)?,
                Conv::new("encoder.conv1", f, f, 3, rng, dtype)?,
                Conv::new("encoder.conv2", f, f, 3, rng, dtype)?,
            ],
            stem: cfg.stem,
        })
    }

    /// Features `(N, F, h/s, w/s)` from `y: (N, C, h, w)` and `o: (N, 3, h, w)`,
    /// where `s` is the stem.
    pub fn forward(&self, y: &Tensor, o: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = y.dims4()?;
        if c != NUM_CLASSES || o.dims() != [n, 3, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "condition inputs {:?} and {:?}",
                y.dims(),
                o.dims()
            )));
        }
        let x = Tensor::cat(&[y, o], 1)?;
        let x = pixel_unshuffle(&x, self.stem)?;
        let x = self.convs[0].forward(&x)?.silu()?;
        let x = self.convs[1].forward(&x)?.silu()?;
        self.convs[2].forward(&x)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.w, &mut c.b])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub time_w: Param,
    pub time_b: Param,
    pub skip: Option<Conv>,
}

impl ResBlock {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
        rng: &mut impl Rng,
        dtype: DType,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(&format!("{name}.conv1"), cin, cout, 3, rng, dtype)?,
            conv2: Conv::new(&format!("{name}.conv2"), cout, cout, 3, rng, dtype)?,
            time_w: Param::new(
                format!("{name}.time.weight"),
                normal(rng, &[cout, tdim], (1.0 / tdim as f64).sqrt(), dtype)?,
            )?,
            time_b: Param::new(format!("{name}.time.bias"), zeros(&[cout], dtype)?)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv::new(
                    &format!("{name}.skip"),
                    cin,
                    cout,
                    1,
                    rng,
                    dtype,
                )?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let shift = linear(temb, &self.time_w.t(), Some(&self.time_b.t()))?;
        let (n, c) = shift.dims2()?;
        let h = self.conv1.forward(&x.silu()?)?;
        let h = h.broadcast_add(&shift.reshape((n, c, 1, 1))?)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }

    fn params(&self) -> Vec<&Param> {
        let mut out = self.conv1.params();
        out.extend(self.conv2.params());
        out.extend([&self.time_w, &self.time_b]);
        if let Some(s) = &self.skip {
            out.extend(s.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
        ];
        out.extend([&mut self.time_w, &mut self.time_b]);
        if let Some(s) = self.skip.as_mut() {
            out.extend([&mut s.w, &mut s.b]);
        }
        out
    }
}

/// Sinusoidal code of `t/T`, one row per entry of `fractions`.
pub fn time_code(fractions: &[f64], dtype: DType) -> Result<Tensor> {
    let half = TIME_CODE_DIM / 2;
    let mut data = Vec::with_capacity(fractions.len() * TIME_CODE_DIM);
    for &u in fractions {
        let pos = 1000.0 * u;
        let freq = |i: usize| (-(1000f64.ln()) * i as f64 / half as f64).exp();
        data.extend((0..half).map(|i| (pos * freq(i)).sin()));
        data.extend((0..half).map(|i| (pos * freq(i)).cos()));
    }
    Ok(Tensor::from_vec(data, (fractions.len(), TIME_CODE_DIM), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Predicts the bridge residual from `x_t`, conditioning features and the
/// step. Two resolution levels with a skip connection; the timestep code is
/// injected into every block.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub stem: usize,
    pub time_w: Param,
    pub time_b: Param,
    pub input: Conv,
    pub down: ResBlock,
    pub mid: ResBlock,
    pub up: ResBlock,
    pub output: Conv,
}

impl Denoiser {
    pub fn new(cfg: &NetworkConfig, rng: &mut impl Rng, dtype: DType) -> Result<Self> {
        let w = cfg.base_width;
        let tdim = w;
        let area = cfg.stem * cfg.stem;
        Ok(Self {
            stem: cfg.stem,
            time_w: Param::new(
                "denoiser.time.weight",
                normal(
                    rng,
                    &[tdim, TIME_CODE_DIM],
                    (1.0 / TIME_CODE_DIM as f64).sqrt(),
                    dtype,
                )?,
            )?,
            time_b: Param::new("denoiser.time.bias", zeros(&[tdim], dtype)?)?,
            input: Conv::new(
                "denoiser.input",
                NUM_CLASSES * area + cfg.cond_width,
                w,
                3,
                rng,
                dtype,
            )?,
            down: ResBlock::new("denoiser.down", w, w, tdim, rng, dtype)?,
            mid: ResBlock::new("denoiser.mid", w, 2 * w, tdim, rng, dtype)?,
            up: ResBlock::new("denoiser.up", 3 * w, w, tdim, rng, dtype)?,
            output: Conv::new("denoiser.output", w, NUM_CLASSES * area, 3, rng, dtype)?,
        })
    }

    /// `x_t: (N, C, h, w)`, `cond: (N, F, h/s, w/s)`, one step fraction per
    /// sample.
    pub fn forward(&self, xt: &Tensor, cond: &Tensor, fractions: &[f64]) -> Result<Tensor> {
        let (n, _, h, w) = xt.dims4()?;
        if fractions.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} step values for {n} samples",
                fractions.len()
            )));
        }
        let unit = 2 * self.stem;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::ShapeMismatch(format!(
                "denoiser needs sizes divisible by {unit}, got {h}x{w}"
            )));
        }
        let code = time_code(fractions, xt.dtype())?;
        let temb = linear(&code, &self.time_w.t(), Some(&self.time_b.t()))?.silu()?;
        let x = pixel_unshuffle(xt, self.stem)?;
        let h0 = self.input.forward(&Tensor::cat(&[&x, cond], 1)?)?;
        let h1 = self.down.forward(&h0, &temb)?;
        let h2 = self.mid.forward(&box_downsample(&h1, 2)?, &temb)?;
        let u = Tensor::cat(&[&upsample_nearest(&h2, 2)?, &h1], 1)?;
        let h3 = self.up.forward(&u, &temb)?;
        pixel_shuffle(&self.output.forward(&h3.silu()?)?, self.stem)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.time_w, &self.time_b];
        out.extend(self.input.params());
        out.extend(self.down.params());
        out.extend(self.mid.params());
        out.extend(self.up.params());
        out.extend(self.output.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![
            &mut self.time_w,
            &mut self.time_b,
            &mut self.input.w,
            &mut self.input.b,
        ];
        out.extend(self.down.params_mut());
        out.extend(self.mid.params_mut());
        out.extend(self.up.params_mut());
        out.extend([&mut self.output.w, &mut self.output.b]);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for f in [1, 2, 4] {
            let cfg = NetworkConfig {
                cond_width: 4,
                base_width: 8,
                stem: f,
            };
            let enc = ConditionEncoder::new(&cfg, &mut rng, DType::F32).unwrap();
            let den = Denoiser::new(&cfg, &mut rng, DType::F32).unwrap();
            let y = normal(&mut rng, &[2, 7, 16, 16], 1.0, DType::F32).unwrap();
            let o = normal(&mut rng, &[2, 3, 16, 16], 1.0, DType::F32).unwrap();
            let cond = enc.forward(&y, &o).unwrap();
            assert_eq!(cond.dims(), &[2, 4, 16 / f, 16 / f]);
            let out = den.forward(&y, &cond, &[0.1, 0.9]).unwrap();
            assert_eq!(out.dims(), &[2, 7, 16, 16]);
            let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()));
        }
        let bad = NetworkConfig {
            stem: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn time_code_is_bounded_and_distinct() {
        let c = time_code(&[0.0, 0.5, 1.0], DType::F64)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert!(c.iter().flatten().all(|v| v.abs() <= 1.0));
        assert_ne!(c[0], c[1]);
        assert_ne!(c[1], c[2]);
    }

    #[test]
    fn shuffle_inverts_unshuffle() {
        let x = Tensor::arange(0f64, 96.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4, 4))
            .unwrap();
        let u = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(u.dims(), &[2, 12, 2, 2]);
        // Channel 1 of the first image holds pixel (0, 1) of every block.
        let c1 = u.get(0).unwrap().get(1).unwrap().flatten_all().unwrap();
        assert_eq!(c1.to_vec1::<f64>().unwrap(), vec![1.0, 3.0, 9.0, 11.0]);
        let back = pixel_shuffle(&u, 2).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn box_downsample_averages() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let d = box_downsample(&x, 2)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert_eq!(d, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
