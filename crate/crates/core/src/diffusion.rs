//! Linear-β noise schedule, forward noising, and the ε-prediction loss.
//!
//! Timesteps are 1-based throughout (`1..=T`), matching the usual notation;
//! tables are stored 0-based.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaChoice {
    /// `σ_t = √β_t`.
    Beta,
    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    Posterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma: SigmaChoice,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            sigma: SigmaChoice::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule_with(self.timesteps, self.beta_min, self.beta_max, self.sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn build_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    build_schedule_with(timesteps, beta_min, beta_max, SigmaChoice::Beta)
}

pub fn build_schedule_with(timesteps: usize, beta_min: f64, beta_max: f64, sigma: SigmaChoice) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma = match sigma {
        SigmaChoice::Beta => beta.iter().map(|b| b.sqrt()).collect(),
        SigmaChoice::Posterior => (0..timesteps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect(),
    };
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.timesteps() {
            Err(Error::Timestep {
                t,
                max: self.timesteps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(t)?;
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("x0 has length {}, eps {}", x0.len(), eps.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One training pair: a clean latent and its conditioning text feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Vec<f64>,
    pub cond: Vec<f64>,
}

/// Any ε-predictor that can be evaluated on a batch of noisy latents.
pub trait EpsModel {
    fn predict_eps(&self, x_t: &[Vec<f64>], t: &[usize], cond: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

/// Per-example timestep and noise for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub t: usize,
    pub eps: Vec<f64>,
}

pub fn sample_draws(batch: &[Example], sched: &NoiseSchedule, rng: &mut Rng) -> Vec<Draw> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=sched.timesteps());
            Draw {
                t,
                eps: rng::normal_vec(rng, ex.x0.len()),
            }
        })
        .collect()
}

/// Noisy inputs for a batch under fixed draws.
pub fn noisy_batch(batch: &[Example], draws: &[Draw], sched: &NoiseSchedule) -> Result<Vec<Vec<f64>>> {
    batch.iter().zip(draws).map(|(ex, d)| forward_noise(&ex.x0, d.t, &d.eps, sched)).collect()
}

/// Mean over the batch of `‖ε − ε_θ(x_t, t, c)‖²` with `t` uniform on `1..=T`.
pub fn ddpm_loss(batch: &[Example], model: &impl EpsModel, sched: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let draws = sample_draws(batch, sched, rng);
    ddpm_loss_with_draws(batch, &draws, model, sched)
}

pub fn ddpm_loss_with_draws(batch: &[Example], draws: &[Draw], model: &impl EpsModel, sched: &NoiseSchedule) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let x_t = noisy_batch(batch, draws, sched)?;
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let conds: Vec<Vec<f64>> = batch.iter().map(|e| e.cond.clone()).collect();
    let pred = model.predict_eps(&x_t, &ts, &conds)?;
    let total: f64 = pred
        .iter()
        .zip(draws)
        .map(|(p, d)| p.iter().zip(&d.eps).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / batch.len() as f64)
}
