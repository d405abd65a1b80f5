//! Ancestral sampling with NULL-condition guidance.
//!
//! Sample `i` draws its start point and every step's noise from
//! `rng::stream(seed, i)`. Samples are evaluated in fixed chunks of
//! [`CHUNK`], so results do not depend on the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::diffusion::{EpsModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng;

pub const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullMode {
    /// Mean canonical text feature of the dataset.
    MeanText,
    Zero,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub eta: f64,
    pub null_mode: NullMode,
    /// Reverse steps to run, starting from `t = steps`. `None` runs all `T`.
    pub steps: Option<usize>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: 1.5,
            null_mode: NullMode::MeanText,
            steps: None,
        }
    }
}

impl GuidanceConfig {
    pub fn resolve(&self, dataset: &Corpus, sched: &NoiseSchedule) -> Result<Guidance> {
        let steps = self.steps.unwrap_or(sched.timesteps());
        if steps == 0 || steps > sched.timesteps() {
            return Err(Error::Config(format!("sampling steps {steps} outside 1..={}", sched.timesteps())));
        }
        if !self.eta.is_finite() {
            return Err(Error::Config("guidance ratio must be finite".into()));
        }
        Ok(Guidance {
            eta: self.eta,
            null_cond: make_null_condition(dataset, &self.null_mode)?,
            steps,
        })
    }
}

/// Guidance with the null condition already computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance {
    pub eta: f64,
    pub null_cond: Vec<f64>,
    pub steps: usize,
}

pub fn make_null_condition(corpus: &Corpus, mode: &NullMode) -> Result<Vec<f64>> {
    match mode {
        NullMode::Zero => Ok(vec![0.0; corpus.dim_text()]),
        NullMode::Explicit(v) => {
            if v.len() != corpus.dim_text() {
                return Err(Error::Shape(format!("null vector has length {}, expected {}", v.len(), corpus.dim_text())));
            }
            Ok(v.clone())
        }
        NullMode::MeanText => {
            let feats: Vec<Vec<f64>> = corpus.records().iter().filter_map(|r| r.canonical_text()).collect();
            if feats.is_empty() {
                return Err(Error::Empty("text features for the mean null condition"));
            }
            let mut mean = vec![0.0; corpus.dim_text()];
            for f in &feats {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v;
                }
            }
            let n = feats.len() as f64;
            Ok(mean.into_iter().map(|m| m / n).collect())
        }
    }
}

/// `η·ε_text + (1 − η)·ε_null`, the same affine map as
/// `(ε_text − ε_null)·η + ε_null` but exact at `η = 1` and `η = 0`.
pub fn guided_epsilon(eps_text: &[f64], eps_null: &[f64], eta: f64) -> Result<Vec<f64>> {
    if eps_text.len() != eps_null.len() {
        return Err(Error::Shape(format!("ε_text has length {}, ε_null {}", eps_text.len(), eps_null.len())));
    }
    Ok(eps_text.iter().zip(eps_null).map(|(t, n)| eta * t + (1.0 - eta) * n).collect())
}

/// `x_{t−1} = (x_t − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t + σ_t·z`.
pub fn reverse_step(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    sched.check(t)?;
    if eps_hat.len() != x_t.len() || z.len() != x_t.len() {
        return Err(Error::Shape("reverse step inputs differ in length".into()));
    }
    let a = sched.alpha(t);
    let coef = (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / a.sqrt();
    let s = sched.sigma(t);
    Ok(x_t.iter().zip(eps_hat).zip(z).map(|((x, e), z)| inv * (x - coef * e) + s * z).collect())
}

fn run<M: EpsModel + Sync>(
    model: &M,
    dim: usize,
    conds: &[Vec<f64>],
    guidance: Option<&Guidance>,
    steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    sched.check(steps)?;
    let chunks: Vec<Result<Vec<Vec<f64>>>> = conds
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut rngs: Vec<rng::Rng> = (0..chunk.len()).map(|j| rng::stream(seed, (ci * CHUNK + j) as u64)).collect();
            let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|g| rng::normal_vec(g, dim)).collect();
            let nulls: Vec<Vec<f64>> = guidance.map(|g| vec![g.null_cond.clone(); chunk.len()]).unwrap_or_default();
            for t in (1..=steps).rev() {
                let ts = vec![t; chunk.len()];
                let eps_text = model.predict_eps(&xs, &ts, chunk)?;
                let eps = match guidance {
                    Some(g) => {
                        let eps_null = model.predict_eps(&xs, &ts, &nulls)?;
                        eps_text
                            .iter()
                            .zip(&eps_null)
                            .map(|(a, b)| guided_epsilon(a, b, g.eta))
                            .collect::<Result<Vec<_>>>()?
                    }
                    None => eps_text,
                };
                for ((x, e), g) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                    let z = if t > 1 { rng::normal_vec(g, dim) } else { vec![0.0; dim] };
                    *x = reverse_step(x, t, e, sched, &z)?;
                }
            }
            Ok(xs)
        })
        .collect();
    let mut out = Vec::with_capacity(conds.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// One guided sample per condition.
pub fn sample_conditions<M: EpsModel + Sync>(
    model: &M,
    dim: usize,
    conds: &[Vec<f64>],
    guidance: &Guidance,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if let Some(c) = conds.first() {
        if c.len() != guidance.null_cond.len() {
            return Err(Error::Shape(format!("condition has length {}, null condition {}", c.len(), guidance.null_cond.len())));
        }
    }
    run(model, dim, conds, Some(guidance), guidance.steps, sched, seed)
}

/// `n` guided samples under one condition.
pub fn sample<M: EpsModel + Sync>(
    model: &M,
    dim: usize,
    cond: &[f64],
    guidance: &Guidance,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    sample_conditions(model, dim, &vec![cond.to_vec(); n], guidance, sched, seed)
}

/// The plain conditional sampler: no null-condition evaluation at all.
pub fn sample_unguided<M: EpsModel + Sync>(
    model: &M,
    dim: usize,
    cond: &[f64],
    steps: usize,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    run(model, dim, &vec![cond.to_vec(); n], None, steps, sched, seed)
}
