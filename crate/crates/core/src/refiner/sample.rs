use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bridge::{reconstruct_x0_from_residual, standard_normal};
use super::schedule::BridgeSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Deterministic bridge update along a step subsequence.
    Ddim,
    /// Gaussian posterior draws along a step subsequence.
    Ancestral,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "ancestral" => Ok(Self::Ancestral),
            other => Err(Error::Config(format!("unknown sampling mode '{other}'"))),
        }
    }
}

/// Runs the reverse bridge from `x_T = y` and returns the final estimate of
/// `x_0` as an unconstrained field (apply a channel softmax to get
/// probabilities).
///
/// `predict(x_t, t)` returns the estimated residual `x_t − x_0`.
pub fn reverse_bridge<F>(
    predict: F,
    y: &Tensor,
    sched: &BridgeSchedule,
    n_steps: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<Tensor>
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    let steps = sched.subsequence(n_steps)?;
    let mut xt = y.clone();
    let mut x0_hat = y.clone();
    for pair in steps.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        x0_hat = reconstruct_x0_from_residual(&xt, &predict(&xt, t)?)?;
        xt = match mode {
            SampleMode::Ddim => {
                let base = ((&x0_hat * (1.0 - sched.m[s]))? + (y * sched.m[s])?)?;
                if sched.delta[t] == 0.0 || sched.delta[s] == 0.0 {
                    base
                } else {
                    let noise = ((&xt - (&x0_hat * (1.0 - sched.m[t]))?)? - (y * sched.m[t])?)?;
                    (base + (noise * (sched.delta[s] / sched.delta[t]).sqrt())?)?
                }
            }
            SampleMode::Ancestral => {
                let p = sched.posterior(s, t)?;
                let mean = ((&x0_hat * p.c_x0)? + (y * p.c_y)? + (&xt * p.c_xt)?)?;
                if p.var > 0.0 {
                    (mean + (standard_normal(rng, &xt)? * p.var.sqrt())?)?
                } else {
                    mean
                }
            }
        };
        if s == 0 {
            x0_hat = xt.clone();
        }
    }
    Ok(x0_hat)
}
