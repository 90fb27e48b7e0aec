//! Forward bridge, training targets and the losses built on them. Fields are
//! plain tensors of any shape; batched tensors are `(N, C, h, w)`.

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::schedule::BridgeSchedule;
use crate::error::{Error, Result};
use crate::nn::scalar;
use crate::tiling::{MaskKind, ProbMask};

/// I.i.d. standard normal field shaped like `like`.
pub fn standard_normal(rng: &mut impl Rng, like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = (0..like.elem_count())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Ok(Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `x_t = (1 − m_t)·x_0 + m_t·y + √δ_t·ε` for a given noise field.
pub fn bridge_state(
    x0: &Tensor,
    y: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    same_shape(x0, y, "x0 and y")?;
    same_shape(x0, eps, "x0 and noise")?;
    let (a, b, d) = sched.marginal(t);
    Ok(((x0 * a)? + (y * b)? + (eps * d.sqrt())?)?)
}

/// Draws `ε` and returns `(x_t, ε)`.
pub fn forward_sample_tensor(
    x0: &Tensor,
    y: &Tensor,
    t: usize,
    sched: &BridgeSchedule,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let eps = standard_normal(rng, x0)?;
    Ok((bridge_state(x0, y, &eps, t, sched)?, eps))
}

pub fn forward_sample(
    x0: &ProbMask,
    y: &ProbMask,
    t: usize,
    sched: &BridgeSchedule,
    rng: &mut impl Rng,
) -> Result<(ProbMask, Tensor)> {
    if x0.kind() != MaskKind::OneHot {
        return Err(Error::InvalidArgument("x0 must be a one-hot mask".into()));
    }
    if y.kind() != MaskKind::Coarse {
        return Err(Error::InvalidArgument("y must be a coarse mask".into()));
    }
    let (xt, eps) = forward_sample_tensor(x0.values(), y.values(), t, sched, rng)?;
    Ok((
        ProbMask::from_tensor_unchecked(xt, MaskKind::DiffusionState),
        eps,
    ))
}

/// The residual the denoiser learns: `m_t·(y − x_0) + √δ_t·ε`, which equals
/// `x_t − x_0`.
pub fn noise_target(
    x0: &Tensor,
    y: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    same_shape(x0, y, "x0 and y")?;
    same_shape(x0, eps, "x0 and noise")?;
    Ok((((y - x0)? * sched.m[t])? + (eps * sched.delta[t].sqrt())?)?)
}

/// Inverts the forward map given a noise estimate:
/// `x̂_0 = (x_t − m_t·y − √δ_t·ε̂)/(1 − m_t)`.
pub fn reconstruct_x0(
    xt: &Tensor,
    y: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    sched: &BridgeSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    if t == sched.steps {
        return Err(Error::InvalidArgument(
            "x0 cannot be recovered from the bridge endpoint".into(),
        ));
    }
    same_shape(xt, y, "x_t and y")?;
    same_shape(xt, eps_pred, "x_t and noise")?;
    let num = ((xt - (y * sched.m[t])?)? - (eps_pred * sched.delta[t].sqrt())?)?;
    Ok((num / (1.0 - sched.m[t]))?)
}

/// `x̂_0 = x_t − r̂` for a predicted residual `r̂`; valid at every step.
pub fn reconstruct_x0_from_residual(xt: &Tensor, residual: &Tensor) -> Result<Tensor> {
    same_shape(xt, residual, "x_t and residual")?;
    Ok((xt - residual)?)
}

/// Unweighted mean squared error.
pub fn transition_loss(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(prediction, target, "prediction and target")?;
    let loss = (prediction - target)?.sqr()?.mean_all()?;
    if !scalar(&loss)?.is_finite() {
        return Err(Error::Numerical("transition loss is not finite".into()));
    }
    Ok(loss)
}

/// Mean over pixels of `−Σ_c x_0 · log softmax_c(x̂_0)`; channels are dim 1
/// of a `(N, C, h, w)` batch.
pub fn segmentation_loss(x0_hat: &Tensor, x0: &Tensor) -> Result<Tensor> {
    same_shape(x0_hat, x0, "x0_hat and x0")?;
    let (n, _, h, w) = x0_hat.dims4()?;
    let logp = candle_nn::ops::log_softmax(x0_hat, 1)?;
    let loss = ((x0 * logp)?.sum_all()? * (-1.0 / (n * h * w) as f64))?;
    if !scalar(&loss)?.is_finite() {
        return Err(Error::Numerical("segmentation loss is not finite".into()));
    }
    Ok(loss)
}

/// Channel-wise softmax of a `(C, h, w)` or `(N, C, h, w)` field.
pub fn channel_softmax(x: &Tensor) -> Result<Tensor> {
    let dim = if x.rank() == 4 { 1 } else { 0 };
    Ok(candle_nn::ops::softmax(x, dim)?)
}

/// A constant field with the shape of `like`.
pub fn full_like(like: &Tensor, value: f64) -> Result<Tensor> {
    Ok(Tensor::full(value, like.shape(), &Device::Cpu)?.to_dtype(like.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all()
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_vec1()
            .unwrap()
    }

    fn field(rng: &mut ChaCha8Rng) -> Tensor {
        standard_normal(
            rng,
            &Tensor::zeros((2, 7, 4, 4), DType::F64, &Device::Cpu).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn endpoints_are_exact() {
        let sched = BridgeSchedule::new(10, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x0, y) = (field(&mut rng), field(&mut rng));
        let (a, _) = forward_sample_tensor(&x0, &y, 0, &sched, &mut rng).unwrap();
        let (b, _) = forward_sample_tensor(&x0, &y, 10, &sched, &mut rng).unwrap();
        assert_eq!(vals(&a), vals(&x0));
        assert_eq!(vals(&b), vals(&y));
    }

    #[test]
    fn target_hand_value() {
        let sched = BridgeSchedule::new(4, 1.0).unwrap();
        let t = |v: f64| Tensor::new(&[v], &Device::Cpu).unwrap();
        let r = noise_target(&t(0.0), &t(1.0), &t(2.0), 2, &sched).unwrap();
        assert!((vals(&r)[0] - (0.5 + 0.5f64.sqrt() * 2.0)).abs() < 1e-12);
        let r0 = noise_target(&t(0.3), &t(0.8), &t(2.0), 0, &sched).unwrap();
        assert_eq!(vals(&r0), vec![0.0]);
        assert!(noise_target(&t(0.3), &t(0.8), &t(2.0), 5, &sched).is_err());
    }

    #[test]
    fn reconstruction_inverts_forward() {
        let sched = BridgeSchedule::new(200, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x0, y) = (field(&mut rng), field(&mut rng));
        for t in [0, 1, 57, 100, 199] {
            let (xt, eps) = forward_sample_tensor(&x0, &y, t, &sched, &mut rng).unwrap();
            let back = reconstruct_x0(&xt, &y, &eps, t, &sched).unwrap();
            let res = noise_target(&x0, &y, &eps, t, &sched).unwrap();
            let back2 = reconstruct_x0_from_residual(&xt, &res).unwrap();
            for ((a, b), c) in vals(&back).iter().zip(vals(&x0)).zip(vals(&back2)) {
                assert!((a - b).abs() < 1e-10 && (c - b).abs() < 1e-10);
            }
        }
        let (xt, eps) = forward_sample_tensor(&x0, &y, 0, &sched, &mut rng).unwrap();
        assert_eq!(
            vals(&reconstruct_x0(&xt, &y, &eps, 0, &sched).unwrap()),
            vals(&xt)
        );
        assert!(reconstruct_x0(&y, &y, &eps, 200, &sched).is_err());
    }

    #[test]
    fn losses_hand_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = field(&mut rng);
        assert_eq!(scalar(&transition_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let l = scalar(&transition_loss(&(&a + 1.0).unwrap(), &a).unwrap()).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        let p = field(&mut rng);
        let mirrored = ((&a * 2.0).unwrap() - &p).unwrap();
        let l1 = scalar(&transition_loss(&p, &a).unwrap()).unwrap();
        let l2 = scalar(&transition_loss(&mirrored, &a).unwrap()).unwrap();
        assert!((l1 - l2).abs() < 1e-12);

        let labels: Vec<f64> = (0..2 * 7 * 16)
            .map(|i| {
                if (i / 16) % 7 == (i % 16) % 7 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let onehot = Tensor::from_vec(labels, (2, 7, 4, 4), &Device::Cpu).unwrap();
        let uniform = full_like(&onehot, 0.3).unwrap();
        let ce = scalar(&segmentation_loss(&uniform, &onehot).unwrap()).unwrap();
        assert!((ce - 7f64.ln()).abs() < 1e-12);
        let sharp = (&onehot * 20.0).unwrap();
        let ce = scalar(&segmentation_loss(&sharp, &onehot).unwrap()).unwrap();
        assert!((0.0..1e-6).contains(&ce));
    }
}
