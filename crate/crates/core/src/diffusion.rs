//! Noise schedule, forward noising, group timestep sampling, label dropout
//! and the group denoising loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Linear beta schedule parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// 100 steps with the usual 1000-step endpoints scaled by 10, so the
    /// final `alpha_bar` is still close to zero.
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Discrete DDPM schedule. `alpha_bar[t]` is the product of `1 - beta` up to
/// and including `t`, so `t = 0` is one small step away from clean data.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [0, {})",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`, elementwise.
pub fn mix(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

pub fn forward_noising(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noise {:?} does not match image {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    Tensor::new(
        x0.shape().to_vec(),
        mix(x0.data(), eps.data(), schedule.alpha_bar(t)),
    )
}

/// Per-group training noise settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupNoisePolicy {
    /// Maximum deviation of any member's timestep from the anchor's.
    pub sigma_tv: usize,
    pub label_dropout_p: f64,
}

impl Default for GroupNoisePolicy {
    fn default() -> Self {
        GroupNoisePolicy {
            sigma_tv: 5,
            label_dropout_p: 0.1,
        }
    }
}

impl GroupNoisePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_dropout_p) {
            return Err(Error::Config(format!(
                "label_dropout_p {} outside [0, 1]",
                self.label_dropout_p
            )));
        }
        Ok(())
    }
}

/// Anchor timestep uniform on `[0, T)`; every other member uniform on the
/// window of radius `sigma_tv` around it, clipped to `[0, T)`.
pub fn sample_group_timesteps(
    n: usize,
    sigma_tv: usize,
    timesteps: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    if n == 0 || timesteps == 0 {
        return Vec::new();
    }
    let t0 = rng.random_range(0..timesteps);
    let lo = t0.saturating_sub(sigma_tv);
    let hi = t0.saturating_add(sigma_tv).min(timesteps - 1);
    let mut ts = Vec::with_capacity(n);
    ts.push(t0);
    ts.extend((1..n).map(|_| rng.random_range(lo..=hi)));
    ts
}

/// Largest `|t_i - t_0|` over a group.
pub fn max_deviation(ts: &[usize]) -> usize {
    ts.iter().map(|&t| t.abs_diff(ts[0])).max().unwrap_or(0)
}

/// Sum over members of the per-member mean squared error.
///
/// Both tensors have the member axis first.
pub fn group_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape().is_empty() {
        return Err(Error::Dimension(format!(
            "loss prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let per = pred.len() / pred.shape()[0];
    if per == 0 {
        return Ok(0.0);
    }
    Ok(pred
        .data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / per as f64)
        .sum())
}

/// Drops the whole group's labels to `null_label` with probability `p`.
/// Returns the labels and whether they were dropped.
pub fn label_dropout(
    labels: &[usize],
    p: f64,
    null_label: usize,
    rng: &mut Rng,
) -> (Vec<usize>, bool) {
    // p = 0 and p = 1 still consume one draw so streams stay aligned
    let dropped = rng.random::<f64>() < p;
    if dropped {
        (vec![null_label; labels.len()], true)
    } else {
        (labels.to_vec(), false)
    }
}
