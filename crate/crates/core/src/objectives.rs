//! Training objective: closed-form KL to the standard-normal prior, KL
//! annealing, free bits, and the fraternal twin-pass reconstruction with its
//! hidden-state penalty.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::PaddedBatch;
use crate::error::{Error, Result};
use crate::model::{GaussianPosterior, PosteriorVars, VaeModel};
use crate::nn::{sample_mask_pair, MaskPair};
use crate::tensor::Tensor;

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlTerms {
    pub total: f64,
    pub per_dim: Vec<f64>,
}

pub fn kl_diag_gaussian(post: &GaussianPosterior) -> KlTerms {
    let per_dim: Vec<f64> = post
        .mu
        .iter()
        .zip(&post.logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .collect();
    KlTerms {
        total: per_dim.iter().sum(),
        per_dim,
    }
}

/// Elementwise KL terms of a batch of posteriors, `[batch x k]`.
pub fn kl_elements(tape: &mut Tape, post: PosteriorVars) -> Result<Var> {
    let mu2 = tape.mul(post.mu, post.mu)?;
    let var = tape.exp(post.logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, post.logvar)?;
    let c = tape.add_scalar(b, -1.0);
    Ok(tape.scale(c, 0.5))
}

/// Linear KL warm-up: `beta(step) = min(step / warmup_steps, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub warmup_steps: usize,
}

impl AnnealSchedule {
    pub fn new(warmup_steps: usize) -> Result<Self> {
        if warmup_steps == 0 {
            return Err(Error::config("warmup_steps", "must be positive"));
        }
        Ok(AnnealSchedule { warmup_steps })
    }
}

pub fn anneal_weight(step: usize, schedule: &AnnealSchedule) -> f64 {
    (step as f64 / schedule.warmup_steps as f64).min(1.0)
}

/// `max(kl, lambda)` on plain values.
pub fn free_bits(kl: f64, lambda: f64) -> f64 {
    kl.max(lambda)
}

/// `max(kl, lambda)` on the tape; the clamped branch passes no gradient.
pub fn free_bits_var(tape: &mut Tape, kl: Var, lambda: f64) -> Var {
    if lambda > 0.0 {
        tape.clamp_min(kl, lambda)
    } else {
        kl
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight of the fraternal penalty; 0 disables the twin passes entirely.
    pub alpha: f64,
    /// Word keep probability of the first fraternal mask.
    pub keep_prob: f64,
    /// Free-bits threshold on the batch-mean KL; 0 disables it.
    pub free_bits: f64,
    /// Apply the threshold per latent dimension (`free_bits / k` each) instead.
    pub free_bits_per_dim: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 0.0,
            keep_prob: 0.7,
            free_bits: 0.0,
            free_bits_per_dim: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(Error::config(
                "keep_prob",
                format!("must lie in [0, 1], got {}", self.keep_prob),
            ));
        }
        if !(self.free_bits >= 0.0 && self.free_bits.is_finite()) {
            return Err(Error::config(
                "free_bits",
                format!("must be >= 0, got {}", self.free_bits),
            ));
        }
        Ok(())
    }

    pub fn fraternal(&self) -> bool {
        self.alpha > 0.0
    }
}

/// Scalar summary of one objective evaluation; every term is a batch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_raw: f64,
    pub kl_effective: f64,
    pub beta: f64,
    pub fraternal_penalty: f64,
    pub total: f64,
}

/// Random inputs of one objective evaluation, drawn up front so the step is a
/// deterministic function of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// `[batch x k]` standard-normal draws; `None` uses `z = mu`.
    pub eps: Option<Tensor>,
    /// One mask pair per sentence when the fraternal passes are enabled.
    pub masks: Option<Vec<MaskPair>>,
}

pub fn sample_noise<R: Rng + ?Sized>(
    batch: &PaddedBatch,
    latent_dim: usize,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<StepNoise> {
    let b = batch.len();
    let eps: Vec<f64> = (0..b * latent_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let masks = if cfg.fraternal() {
        let mut m = Vec::with_capacity(b);
        for &n in &batch.lengths {
            m.push(sample_mask_pair(n, cfg.keep_prob, rng)?);
        }
        Some(m)
    } else {
        None
    };
    Ok(StepNoise {
        eps: Some(Tensor::new(vec![b, latent_dim], eps)?),
        masks,
    })
}

/// Batch-mean twin log-likelihood and normalised hidden-state distance.
#[derive(Debug, Clone, Copy)]
pub struct FraternalVars {
    /// Scalar `mean_r (ll'_r + ll''_r) / 2`.
    pub mean_log_lik: Var,
    /// Scalar batch mean of `||H' - H''||^2 / (positions * d)`.
    pub penalty: Var,
}

/// Decodes the batch twice from the same `z`, once under each mask of every
/// sentence's pair.
pub fn fraternal_vars(
    tape: &mut Tape,
    model: &VaeModel,
    z: Var,
    batch: &PaddedBatch,
    masks: &[MaskPair],
) -> Result<FraternalVars> {
    if masks.len() != batch.len() {
        return Err(Error::Dimension {
            op: "fraternal",
            left: vec![batch.len()],
            right: vec![masks.len()],
        });
    }
    let first: Vec<Vec<f64>> = masks.iter().map(MaskPair::mask).collect();
    let second: Vec<Vec<f64>> = masks.iter().map(MaskPair::complement).collect();
    let a = model.decode_batch(tape, z, batch, Some(&first))?;
    let b = model.decode_batch(tape, z, batch, Some(&second))?;

    let both = tape.add(a.log_lik, b.log_lik)?;
    let mean_both = tape.mean(both);
    let mean_log_lik = tape.scale(mean_both, 0.5);

    let ha = tape.stack_rows(&a.hidden)?;
    let hb = tape.stack_rows(&b.hidden)?;
    let diff = tape.sub(ha, hb)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.sum_axis(sq, 1)?;
    let rows = batch.len();
    let d = model.config.hidden_dim as f64;
    let mut weights = Vec::with_capacity(a.hidden.len() * rows);
    for t in 0..a.hidden.len() {
        for &n in &batch.lengths {
            let positions = (n + 1) as f64;
            weights.push(if t <= n {
                1.0 / (positions * d * rows as f64)
            } else {
                0.0
            });
        }
    }
    let w = tape.constant(Tensor::vector(weights));
    let weighted = tape.mul(per_row, w)?;
    let penalty = tape.sum(weighted);
    Ok(FraternalVars {
        mean_log_lik,
        penalty,
    })
}

/// Value-level twin pass for one sentence: `(mean log-likelihood, penalty)`.
pub fn fraternal_pass(
    model: &VaeModel,
    x: &[usize],
    z: &[f64],
    masks: &MaskPair,
) -> Result<(f64, f64)> {
    if masks.len() != x.len() {
        return Err(Error::Dimension {
            op: "fraternal",
            left: vec![x.len()],
            right: vec![masks.len()],
        });
    }
    let a = model.decode_teacher_forced(z, x, Some(&masks.mask()))?;
    let b = model.decode_teacher_forced(z, x, Some(&masks.complement()))?;
    let dist: f64 = a
        .hidden
        .data()
        .iter()
        .zip(b.hidden.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok((
        0.5 * (a.log_lik + b.log_lik),
        dist / a.hidden.numel() as f64,
    ))
}

/// Differentiable objective of one batch plus its value breakdown.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Encodes, samples one `z` per sentence, reconstructs (once, or twice under
/// complementary masks), and assembles
/// `reconstruction + beta * kl_effective + alpha * penalty`.
pub fn elbo_step(
    tape: &mut Tape,
    model: &VaeModel,
    batch: &PaddedBatch,
    cfg: &ObjectiveConfig,
    beta: f64,
    noise: &StepNoise,
) -> Result<StepOutput> {
    cfg.validate()?;
    let post = model.encode_batch(tape, batch)?;
    let z = match &noise.eps {
        Some(eps) => model.reparameterize_vars(tape, post, eps)?,
        None => post.mu,
    };

    let (log_lik, penalty) = match (&noise.masks, cfg.fraternal()) {
        (Some(masks), true) => {
            let f = fraternal_vars(tape, model, z, batch, masks)?;
            (f.mean_log_lik, Some(f.penalty))
        }
        (None, true) => {
            return Err(Error::Contract(
                "fraternal objective needs a mask pair per sentence".into(),
            ))
        }
        (_, false) => {
            let out = model.decode_batch(tape, z, batch, None)?;
            (tape.mean(out.log_lik), None)
        }
    };
    let reconstruction = tape.neg(log_lik);

    let rows = batch.len() as f64;
    let kl = kl_elements(tape, post)?;
    let kl_sum = tape.sum(kl);
    let kl_raw = tape.scale(kl_sum, 1.0 / rows);
    let kl_effective = if cfg.free_bits_per_dim {
        let k = model.latent_dim() as f64;
        let dims = tape.sum_axis(kl, 0)?;
        let dims = tape.scale(dims, 1.0 / rows);
        let clamped = free_bits_var(tape, dims, cfg.free_bits / k);
        tape.sum(clamped)
    } else {
        free_bits_var(tape, kl_raw, cfg.free_bits)
    };

    let weighted_kl = tape.scale(kl_effective, beta);
    let mut total = tape.add(reconstruction, weighted_kl)?;
    if let Some(p) = penalty {
        let scaled = tape.scale(p, cfg.alpha);
        total = tape.add(total, scaled)?;
    }
    let breakdown = LossBreakdown {
        reconstruction: tape.value(reconstruction).item(),
        kl_raw: tape.value(kl_raw).item(),
        kl_effective: tape.value(kl_effective).item(),
        beta,
        fraternal_penalty: penalty.map_or(0.0, |p| tape.value(p).item()),
        total: tape.value(total).item(),
    };
    Ok(StepOutput { total, breakdown })
}
