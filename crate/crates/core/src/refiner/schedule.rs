use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Brownian-bridge noise schedule over `T` steps.
///
/// `m_t = t/T` moves the mean from the clean mask to the coarse one and
/// `δ_t = 2s(m_t − m_t²)` is the marginal variance, zero at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    pub steps: usize,
    pub s: f64,
    pub m: Vec<f64>,
    pub delta: Vec<f64>,
    /// Variance of `x_t` given `x_{t−1}`; entry 0 is unused and set to 0.
    pub delta_cond: Vec<f64>,
    /// Variance of `x_{t−1}` given `x_t` and `x_0`; entry 0 is unused and set to 0.
    pub delta_tilde: Vec<f64>,
}

/// Gaussian `q(x_s | x_t, x_0, y) = N(c_x0·x_0 + c_y·y + c_xt·x_t, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefs {
    pub c_x0: f64,
    pub c_y: f64,
    pub c_xt: f64,
    pub var: f64,
}

impl BridgeSchedule {
    pub fn new(steps: usize, s: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "bridge needs T >= 2, got {steps}"
            )));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "variance scale must be positive, got {s}"
            )));
        }
        let tt = steps as f64;
        let m: Vec<f64> = (0..=steps).map(|t| t as f64 / tt).collect();
        let delta: Vec<f64> = m.iter().map(|&mt| 2.0 * s * (mt - mt * mt)).collect();
        let mut sched = Self {
            steps,
            s,
            m,
            delta,
            delta_cond: vec![0.0],
            delta_tilde: vec![0.0],
        };
        for t in 1..=steps {
            let p = sched.posterior(t - 1, t)?;
            let a = (1.0 - sched.m[t]) / (1.0 - sched.m[t - 1]);
            sched
                .delta_cond
                .push(sched.delta[t] - sched.delta[t - 1] * a * a);
            sched.delta_tilde.push(p.var);
        }
        Ok(sched)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 0..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// Mean and variance of the marginal `q(x_t | x_0, y)`: the mean is
    /// `(1 − m_t)·x_0 + m_t·y`.
    pub fn marginal(&self, t: usize) -> (f64, f64, f64) {
        (1.0 - self.m[t], self.m[t], self.delta[t])
    }

    /// Posterior of an earlier step `s < t` given `x_t`, `x_0` and `y`.
    ///
    /// When `δ_t = 0` (only at `t = T`) `x_t` equals `y` and carries no
    /// information, so the posterior is the marginal at `s`.
    pub fn posterior(&self, s: usize, t: usize) -> Result<PosteriorCoefs> {
        self.check_step(t)?;
        if s >= t {
            return Err(Error::InvalidArgument(format!(
                "posterior needs s < t, got s={s}, t={t}"
            )));
        }
        let (ms, mt) = (self.m[s], self.m[t]);
        let (ds, dt) = (self.delta[s], self.delta[t]);
        if dt == 0.0 {
            return Ok(PosteriorCoefs {
                c_x0: 1.0 - ms,
                c_y: ms,
                c_xt: 0.0,
                var: ds,
            });
        }
        let a = (1.0 - mt) / (1.0 - ms);
        let k = a * ds / dt;
        Ok(PosteriorCoefs {
            c_x0: (1.0 - ms) - k * (1.0 - mt),
            c_y: ms - k * mt,
            c_xt: k,
            var: (ds - k * a * ds).max(0.0),
        })
    }

    /// Evenly spaced descending steps from `T` to 0 with `n_steps` jumps.
    pub fn subsequence(&self, n_steps: usize) -> Result<Vec<usize>> {
        if n_steps == 0 || n_steps > self.steps {
            return Err(Error::InvalidArgument(format!(
                "sampling steps {n_steps} outside 1..={}",
                self.steps
            )));
        }
        Ok((0..=n_steps)
            .map(|i| ((n_steps - i) as f64 * self.steps as f64 / n_steps as f64).round() as usize)
            .collect())
    }
}
