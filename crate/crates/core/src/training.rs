//! Adam training of the denoiser and metric-monitored fine-tuning.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::denoiser::{loss_and_grad, DenoiserParams};
use crate::detect::SoftmaxClassifier;
use crate::diffusion::{sample_draws, Example, NoiseSchedule};
use crate::error::{Error, Result};
use crate::evaluate::{early_stop_monitor, frechet_between, metric_features, StopDecision};
use crate::rng;
use crate::sample::{make_null_condition, sample_conditions, Guidance, NullMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub finetune_max_epochs: usize,
    /// Fine-tuning evaluates the monitor every this many epochs.
    pub eval_every: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability of replacing a sample's condition with the mean text feature.
    pub p_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 24,
            max_epochs: 20,
            max_steps: None,
            finetune_max_epochs: 50,
            eval_every: 1,
            patience: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            p_drop: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, eval_every and patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("need 0 <= beta1, beta2 < 1 and adam_eps > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.p_drop) || self.weight_decay < 0.0 {
            return Err(Error::Config("need p_drop in [0, 1] and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut update = mhat / (vhat.sqrt() + cfg.adam_eps);
            if cfg.weight_decay != 0.0 {
                update += cfg.weight_decay * params[i];
            }
            params[i] -= cfg.lr * update;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub metric: f64,
    pub params_hash: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    /// Cumulative optimizer steps at the end of each epoch.
    pub epoch_steps: Vec<usize>,
    /// Parameter hash at the end of each epoch.
    pub epoch_hashes: Vec<String>,
    pub evals: Vec<EvalRecord>,
    pub best_eval: Option<usize>,
    pub stopped_early: bool,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl PartialEq for TrainHistory {
    fn eq(&self, o: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.epoch_losses) == bits(&o.epoch_losses)
            && bits(&self.step_losses) == bits(&o.step_losses)
            && self.epoch_steps == o.epoch_steps
            && self.epoch_hashes == o.epoch_hashes
            && self.evals.len() == o.evals.len()
            && self
                .evals
                .iter()
                .zip(&o.evals)
                .all(|(a, b)| a.epoch == b.epoch && a.step == b.step && a.metric.to_bits() == b.metric.to_bits() && a.params_hash == b.params_hash)
            && self.best_eval == o.best_eval
            && self.stopped_early == o.stopped_early
    }
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.epoch_losses.len()
    }

    /// `epoch,step,loss,frechet` with one row per epoch; `frechet` is empty
    /// for epochs without an eval.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss,frechet\n");
        for (e, (loss, step)) in self.epoch_losses.iter().zip(&self.epoch_steps).enumerate() {
            let metric = self.evals.iter().find(|r| r.epoch == e + 1).map(|r| r.metric.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", e + 1, step, loss, metric);
        }
        s
    }
}

/// Something that scores a checkpoint; lower is better.
pub trait Monitor {
    fn evaluate(&mut self, params: &DenoiserParams) -> Result<f64>;
}

/// Replays a fixed metric sequence.
#[derive(Debug, Clone)]
pub struct ScriptedMonitor {
    values: Vec<f64>,
    next: usize,
}

impl ScriptedMonitor {
    pub fn new(values: Vec<f64>) -> Self {
        ScriptedMonitor { values, next: 0 }
    }
}

impl Monitor for ScriptedMonitor {
    fn evaluate(&mut self, _params: &DenoiserParams) -> Result<f64> {
        let v = *self.values.get(self.next).ok_or(Error::Empty("scripted metric values"))?;
        self.next += 1;
        Ok(v)
    }
}

/// Mean over labels of the Fréchet distance between each label's real
/// latents and samples generated under that label's mean text feature.
pub struct FrechetMonitor<'a> {
    pub reference: &'a Corpus,
    pub sched: &'a NoiseSchedule,
    pub guidance: Guidance,
    pub samples_per_label: usize,
    pub seed: u64,
    pub classifier: Option<&'a SoftmaxClassifier>,
}

impl Monitor for FrechetMonitor<'_> {
    fn evaluate(&mut self, params: &DenoiserParams) -> Result<f64> {
        let per = conditional_frechet(
            params,
            self.reference,
            Some(&self.guidance),
            self.sched,
            self.samples_per_label,
            self.seed,
            self.classifier,
        )?;
        Ok(per.iter().map(|(_, d)| d).sum::<f64>() / per.len() as f64)
    }
}

/// Per-label Fréchet distance of generated versus real latents, labels in
/// first-appearance order. `guidance = None` samples without the null branch.
pub fn conditional_frechet(
    params: &DenoiserParams,
    reference: &Corpus,
    guidance: Option<&Guidance>,
    sched: &NoiseSchedule,
    samples_per_label: usize,
    seed: u64,
    classifier: Option<&SoftmaxClassifier>,
) -> Result<Vec<(String, f64)>> {
    let labels = reference.labels();
    if labels.is_empty() {
        return Err(Error::Empty("reference corpus"));
    }
    let dim = params.config.latent_len();
    let plain = Guidance {
        eta: 1.0,
        null_cond: vec![0.0; params.config.d_text],
        steps: sched.timesteps(),
    };
    let g = guidance.unwrap_or(&plain);
    let mut out = Vec::with_capacity(labels.len());
    for label in labels {
        let members: Vec<_> = reference.records().iter().filter(|r| r.label == label).collect();
        let real: Vec<Vec<f64>> = members.iter().map(|r| r.image_vec.clone()).collect();
        let group = Corpus::new(reference.dim_image(), reference.dim_text(), members.into_iter().cloned().collect())?;
        let cond = make_null_condition(&group, &NullMode::MeanText)?;
        let conds = vec![cond; samples_per_label];
        let s = rng::derive(seed, &format!("frechet/{label}"));
        let generated = match guidance {
            Some(_) => sample_conditions(params, dim, &conds, g, sched, s)?,
            None => crate::sample::sample_unguided(params, dim, &conds[0], g.steps, sched, samples_per_label, s)?,
        };
        let d = frechet_between(&metric_features(&real, classifier)?, &metric_features(&generated, classifier)?)?;
        out.push((label, d));
    }
    Ok(out)
}

struct Prepared {
    x0: Vec<Vec<f64>>,
    texts: Vec<Vec<Vec<f64>>>,
    null: Vec<f64>,
}

fn prepare(corpus: &Corpus, params: &DenoiserParams) -> Result<Prepared> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let cfg = &params.config;
    if corpus.dim_image() != cfg.latent_len() || corpus.dim_text() != cfg.d_text {
        return Err(Error::Shape(format!(
            "corpus dims (image {}, text {}) do not match the denoiser (latent {}, text {})",
            corpus.dim_image(),
            corpus.dim_text(),
            cfg.latent_len(),
            cfg.d_text
        )));
    }
    if let Some(r) = corpus.records().iter().find(|r| r.text_vecs.is_empty()) {
        return Err(Error::MissingText(r.id.clone()));
    }
    Ok(Prepared {
        x0: corpus.records().iter().map(|r| r.image_vec.clone()).collect(),
        texts: corpus.records().iter().map(|r| r.text_vecs.clone()).collect(),
        null: make_null_condition(corpus, &NullMode::MeanText)?,
    })
}

struct Loop<'a> {
    data: Prepared,
    sched: &'a NoiseSchedule,
    cfg: &'a TrainConfig,
    rng: rng::Rng,
    adam: Adam,
    flat: Vec<f64>,
    steps: usize,
}

impl Loop<'_> {
    fn done(&self) -> bool {
        self.cfg.max_steps.is_some_and(|m| self.steps >= m)
    }

    /// One pass over a fresh shuffle. Returns the mean step loss.
    fn epoch(&mut self, params: &mut DenoiserParams, history: &mut TrainHistory) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.data.x0.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(self.cfg.batch_size) {
            if self.done() {
                break;
            }
            let batch: Vec<Example> = idx
                .iter()
                .map(|&i| {
                    let texts = &self.data.texts[i];
                    let pick = self.rng.random_range(0..texts.len());
                    let cond = if self.cfg.p_drop > 0.0 && self.rng.random::<f64>() < self.cfg.p_drop {
                        self.data.null.clone()
                    } else {
                        texts[pick].clone()
                    };
                    Example {
                        x0: self.data.x0[i].clone(),
                        cond,
                    }
                })
                .collect();
            let draws = sample_draws(&batch, self.sched, &mut self.rng);
            let (loss, grad) = loss_and_grad(params, &batch, &draws, self.sched)?;
            if !loss.is_finite() {
                return Err(Error::Config(format!("training diverged at step {}: loss {loss}", self.steps + 1)));
            }
            self.adam.step(&mut self.flat, &grad.flatten(), self.cfg);
            params.net.assign_flat(&self.flat)?;
            self.steps += 1;
            history.step_losses.push(loss);
            total += loss;
            count += 1;
        }
        let mean = if count > 0 { total / count as f64 } else { f64::NAN };
        history.epoch_losses.push(mean);
        history.epoch_steps.push(self.steps);
        history.epoch_hashes.push(params.content_hash());
        Ok(mean)
    }
}

fn start<'a>(corpus: &Corpus, params: &DenoiserParams, sched: &'a NoiseSchedule, cfg: &'a TrainConfig, salt: &str) -> Result<Loop<'a>> {
    cfg.validate()?;
    let data = prepare(corpus, params)?;
    let flat = params.net.flatten();
    Ok(Loop {
        data,
        sched,
        cfg,
        rng: rng::seeded(rng::derive(cfg.seed, salt)),
        adam: Adam::new(flat.len()),
        flat,
        steps: 0,
    })
}

/// Adam on the ε-prediction loss over shuffled mini-batches. Each sample's
/// condition is one of its text features, drawn per step.
pub fn train(corpus: &Corpus, params: &DenoiserParams, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<(DenoiserParams, TrainHistory)> {
    let clock = Instant::now();
    let mut params = params.clone();
    let mut history = TrainHistory::default();
    let mut lp = start(corpus, &params, sched, cfg, "train")?;
    for epoch in 1..=cfg.max_epochs {
        if lp.done() {
            break;
        }
        let loss = lp.epoch(&mut params, &mut history)?;
        log::info!("train epoch {epoch}: loss {loss:.6} ({} steps)", lp.steps);
    }
    history.wall_clock_secs = clock.elapsed().as_secs_f64();
    Ok((params, history))
}

/// The training loop on the original data, scored by `monitor` every
/// `eval_every` epochs and at the last epoch. Returns the checkpoint with
/// the best score seen before the first run of `patience` increases.
pub fn fine_tune(
    params: &DenoiserParams,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    monitor: &mut dyn Monitor,
) -> Result<(DenoiserParams, TrainHistory)> {
    let clock = Instant::now();
    let mut current = params.clone();
    let mut history = TrainHistory::default();
    let mut lp = start(corpus, &current, sched, cfg, "finetune")?;
    let mut metrics = Vec::new();
    let mut best: Option<(usize, DenoiserParams)> = None;
    for epoch in 1..=cfg.finetune_max_epochs {
        let loss = lp.epoch(&mut current, &mut history)?;
        let last = epoch == cfg.finetune_max_epochs || lp.done();
        if epoch % cfg.eval_every != 0 && !last {
            continue;
        }
        let metric = monitor.evaluate(&current)?;
        log::info!("finetune epoch {epoch}: loss {loss:.6}, metric {metric:.6}");
        history.evals.push(EvalRecord {
            epoch,
            step: lp.steps,
            metric,
            params_hash: current.content_hash(),
        });
        metrics.push(metric);
        let i = metrics.len() - 1;
        if best.as_ref().is_none_or(|(b, _)| metric < metrics[*b]) {
            best = Some((i, current.clone()));
        }
        if let StopDecision::Stop { best_index, .. } = early_stop_monitor(&metrics, cfg.patience) {
            debug_assert_eq!(Some(best_index), best.as_ref().map(|b| b.0));
            history.stopped_early = true;
            break;
        }
        if last {
            break;
        }
    }
    history.wall_clock_secs = clock.elapsed().as_secs_f64();
    match best {
        Some((i, p)) => {
            history.best_eval = Some(i);
            Ok((p, history))
        }
        None => Ok((current, history)),
    }
}
