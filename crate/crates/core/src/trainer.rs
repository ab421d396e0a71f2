//! Adam optimisation of the objective, the autoencoder-pretraining baseline
//! with decoder reset, and per-epoch logging.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{batches, CorpusSplit, PaddedBatch};
use crate::error::{Error, Result};
use crate::metrics::corpus_nll;
use crate::model::{ModelConfig, VaeModel};
use crate::objectives::{
    anneal_weight, elbo_step, sample_noise, AnnealSchedule, LossBreakdown, ObjectiveConfig,
    StepNoise,
};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub init_scale: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// KL warm-up length in optimiser steps; `None` means ten epochs of batches.
    pub warmup_steps: Option<usize>,
    /// Free-bits threshold (0 = off).
    pub free_bits: f64,
    pub free_bits_per_dim: bool,
    /// Fraternal penalty weight (0 = off).
    pub alpha: f64,
    pub keep_prob: f64,
    /// Autoencoder epochs before the decoder reset (0 = off).
    pub pretrain_epochs: usize,
    /// Max-norm gradient clipping (off when `None`).
    pub clip_norm: Option<f64>,
    /// Monte-Carlo samples per sentence for the per-epoch dev NLL (0 = skip).
    pub validation_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 64,
            hidden_dim: 128,
            latent_dim: 32,
            init_scale: 0.1,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 20,
            warmup_steps: None,
            free_bits: 0.0,
            free_bits_per_dim: false,
            alpha: 0.0,
            keep_prob: 0.7,
            pretrain_epochs: 0,
            clip_norm: None,
            validation_samples: 10,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            keep_prob: self.keep_prob,
            free_bits: self.free_bits,
            free_bits_per_dim: self.free_bits_per_dim,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            init_scale: self.init_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        for (field, b) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.warmup_steps == Some(0) {
            return Err(Error::config("train.warmup_steps", "must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient {
            param: p.name.clone(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = p.grad.data();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            w[j] -= h.lr * mh / (vh.sqrt() + h.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Vae,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub reconstruction: f64,
    pub kl_raw: f64,
    pub kl_effective: f64,
    pub beta: f64,
    pub fraternal_penalty: f64,
    pub total: f64,
    pub dev_nll: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub detail: DivergenceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    NonFiniteLoss,
    NonFiniteGradient,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last completed step.
    pub model: VaeModel,
    /// Parameters at the end of the epoch with the lowest dev NLL (the final
    /// model when validation is off).
    pub best: VaeModel,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    /// Number of pretraining epochs completed before the decoder reset.
    pub reset_after_epoch: Option<usize>,
    pub steps: usize,
    pub diverged: Option<Divergence>,
}

impl TrainOutcome {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.log.last()
    }
}

#[derive(Default)]
struct Running {
    sum: LossBreakdown,
    n: usize,
}

impl Running {
    fn push(&mut self, b: &LossBreakdown) {
        self.sum.reconstruction += b.reconstruction;
        self.sum.kl_raw += b.kl_raw;
        self.sum.kl_effective += b.kl_effective;
        self.sum.beta += b.beta;
        self.sum.fraternal_penalty += b.fraternal_penalty;
        self.sum.total += b.total;
        self.n += 1;
    }

    fn mean(&self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown {
            reconstruction: self.sum.reconstruction / n,
            kl_raw: self.sum.kl_raw / n,
            kl_effective: self.sum.kl_effective / n,
            beta: self.sum.beta / n,
            fraternal_penalty: self.sum.fraternal_penalty / n,
            total: self.sum.total / n,
        }
    }
}

enum StepResult {
    Ok(LossBreakdown),
    Diverged(DivergenceKind),
}

struct Session<'a> {
    cfg: &'a TrainConfig,
    corpus: &'a CorpusSplit,
    rng: ChaCha8Rng,
    started: Instant,
    log: Vec<EpochRecord>,
    epochs_done: usize,
    steps: usize,
}

impl Session<'_> {
    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.cfg.lr,
            beta1: self.cfg.adam_beta1,
            beta2: self.cfg.adam_beta2,
            eps: self.cfg.adam_eps,
        }
    }

    fn step(
        &mut self,
        model: &mut VaeModel,
        adam: &mut AdamState,
        batch: &PaddedBatch,
        objective: &ObjectiveConfig,
        beta: f64,
        sample_z: bool,
    ) -> Result<StepResult> {
        let noise = if sample_z {
            sample_noise(batch, model.latent_dim(), objective, &mut self.rng)?
        } else {
            StepNoise {
                eps: None,
                masks: None,
            }
        };
        let mut tape = Tape::new();
        let out = match elbo_step(&mut tape, model, batch, objective, beta, &noise) {
            Ok(out) => out,
            Err(Error::Domain { .. }) => return Ok(StepResult::Diverged(DivergenceKind::NonFiniteLoss)),
            Err(e) => return Err(e),
        };
        if !out.breakdown.total.is_finite() {
            return Ok(StepResult::Diverged(DivergenceKind::NonFiniteLoss));
        }
        model.params.zero_grads();
        tape.backward_into(out.total, &mut model.params)?;
        if let Some(max) = self.cfg.clip_norm {
            let norm = model.params.grad_norm();
            if norm > max {
                model.params.scale_grads(max / norm);
            }
        }
        let hyper = self.hyper();
        match adam_step(&mut model.params, adam, &hyper) {
            Ok(()) => Ok(StepResult::Ok(out.breakdown)),
            Err(Error::NonFiniteGradient { .. }) => {
                Ok(StepResult::Diverged(DivergenceKind::NonFiniteGradient))
            }
            Err(e) => Err(e),
        }
    }

    /// Runs one epoch; `schedule` is `None` in the autoencoder phase.
    fn epoch(
        &mut self,
        model: &mut VaeModel,
        adam: &mut AdamState,
        phase: Phase,
        schedule: Option<&AnnealSchedule>,
        vae_steps: &mut usize,
    ) -> Result<std::result::Result<EpochRecord, Divergence>> {
        let objective = match phase {
            Phase::Pretrain => ObjectiveConfig {
                alpha: 0.0,
                free_bits: 0.0,
                ..self.cfg.objective()
            },
            Phase::Vae => self.cfg.objective(),
        };
        let epoch = self.epochs_done + 1;
        let mut running = Running::default();
        let all = batches(
            &self.corpus.train,
            self.cfg.batch_size,
            self.cfg.seed,
            self.epochs_done,
            true,
        )?;
        for batch in &all {
            let beta = match schedule {
                Some(s) => anneal_weight(*vae_steps, s),
                None => 0.0,
            };
            let sample_z = phase == Phase::Vae;
            match self.step(model, adam, batch, &objective, beta, sample_z)? {
                StepResult::Ok(b) => running.push(&b),
                StepResult::Diverged(detail) => {
                    return Ok(Err(Divergence {
                        epoch,
                        step: self.steps,
                        detail,
                    }))
                }
            }
            self.steps += 1;
            if phase == Phase::Vae {
                *vae_steps += 1;
            }
        }
        let dev_nll = if self.cfg.validation_samples > 0 && !self.corpus.dev.is_empty() {
            let s = corpus_nll(
                model,
                &self.corpus.dev,
                self.cfg.validation_samples,
                self.cfg.seed.wrapping_add(epoch as u64),
            )?;
            Some(s.mean())
        } else {
            None
        };
        let m = running.mean();
        let record = EpochRecord {
            epoch,
            phase,
            reconstruction: m.reconstruction,
            kl_raw: m.kl_raw,
            kl_effective: m.kl_effective,
            beta: m.beta,
            fraternal_penalty: m.fraternal_penalty,
            total: m.total,
            dev_nll,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.log.push(record);
        self.epochs_done += 1;
        Ok(Ok(record))
    }
}

/// Trains the autoencoder phase alone: `cfg.pretrain_epochs` epochs with
/// `z = mu`, no KL term and no fraternal passes.
pub fn pretrain_autoencoder(
    model: &mut VaeModel,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    let mut session = Session {
        cfg,
        corpus,
        rng: rng.clone(),
        started: Instant::now(),
        log: Vec::new(),
        epochs_done: 0,
        steps: 0,
    };
    let diverged = autoencoder_phase(&mut session, model)?;
    *rng = session.rng;
    if let Some(d) = diverged {
        return Err(Error::Diverged {
            epoch: d.epoch,
            step: d.step,
            loss: f64::NAN,
        });
    }
    Ok(session.log)
}

/// [`pretrain_autoencoder`] followed by a redraw of every decoder parameter.
/// With zero pretraining epochs the model is returned untouched.
pub fn pretrain_then_reset(
    model: &mut VaeModel,
    corpus: &CorpusSplit,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochRecord>> {
    let log = pretrain_autoencoder(model, corpus, cfg, rng)?;
    if cfg.pretrain_epochs > 0 {
        model.reset_decoder(rng)?;
    }
    Ok(log)
}

fn autoencoder_phase(session: &mut Session<'_>, model: &mut VaeModel) -> Result<Option<Divergence>> {
    if session.cfg.pretrain_epochs == 0 {
        return Ok(None);
    }
    let mut adam = AdamState::new(&model.params);
    let mut unused = 0;
    for _ in 0..session.cfg.pretrain_epochs {
        if let Err(d) = session.epoch(model, &mut adam, Phase::Pretrain, None, &mut unused)? {
            return Ok(Some(d));
        }
    }
    Ok(None)
}

fn pretrain(session: &mut Session<'_>, model: &mut VaeModel) -> Result<Option<Divergence>> {
    let diverged = autoencoder_phase(session, model)?;
    if diverged.is_none() && session.cfg.pretrain_epochs > 0 {
        model.reset_decoder(&mut session.rng)?;
    }
    Ok(diverged)
}

/// Trains a fresh model on `corpus.train`. A non-finite loss or gradient stops
/// training early; the outcome then carries the parameters from before the
/// failing step and a [`Divergence`] record.
pub fn train(corpus: &CorpusSplit, vocab_size: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    corpus.validate(vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = VaeModel::new(cfg.model(vocab_size), &mut rng)?;
    let mut session = Session {
        cfg,
        corpus,
        rng,
        started: Instant::now(),
        log: Vec::new(),
        epochs_done: 0,
        steps: 0,
    };
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_nll = f64::INFINITY;

    let mut diverged = pretrain(&mut session, &mut model)?;
    let reset_after_epoch = (cfg.pretrain_epochs > 0 && diverged.is_none()).then_some(cfg.pretrain_epochs);

    if diverged.is_none() {
        let per_epoch = corpus.train.len().div_ceil(cfg.batch_size);
        let schedule = AnnealSchedule::new(cfg.warmup_steps.unwrap_or(10 * per_epoch))?;
        let mut adam = AdamState::new(&model.params);
        let mut vae_steps = 0;
        for _ in 0..cfg.epochs {
            match session.epoch(&mut model, &mut adam, Phase::Vae, Some(&schedule), &mut vae_steps)? {
                Ok(record) => {
                    let score = record.dev_nll.unwrap_or(f64::NEG_INFINITY);
                    if score <= best_nll || record.dev_nll.is_none() {
                        best_nll = score;
                        best = model.clone();
                        best_epoch = record.epoch;
                    }
                }
                Err(d) => {
                    diverged = Some(d);
                    break;
                }
            }
        }
    }
    if best_epoch == 0 {
        best = model.clone();
    }
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        log: session.log,
        reset_after_epoch,
        steps: session.steps,
        diverged,
    })
}
