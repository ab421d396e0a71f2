//! Built-in correctness checks: gradients of the full objective against
//! finite differences, closed-form KL against Monte Carlo, and BLEU against
//! hand-counted cases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::Fault;
use crate::corpus::PaddedBatch;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::metrics::bleu;
use crate::model::{GaussianPosterior, ModelConfig, VaeModel};
use crate::nn::MaskPair;
use crate::objectives::{elbo_step, kl_diag_gaussian, ObjectiveConfig, StepNoise};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub observed: String,
    pub expected: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// The tiny model, batch and frozen noise used by the objective gradient check.
pub struct TinySetup {
    pub model: VaeModel,
    pub batch: PaddedBatch,
    pub noise: StepNoise,
    pub objective: ObjectiveConfig,
    pub beta: f64,
}

pub fn tiny_setup(seed: u64) -> Result<TinySetup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        vocab_size: 6,
        embed_dim: 4,
        hidden_dim: 4,
        latent_dim: 2,
        init_scale: 0.5,
    };
    let model = VaeModel::new(config, &mut rng)?;
    let batch = PaddedBatch::from_sentences(&[&[4, 5, 4], &[5, 4]], vec![0, 1])?;
    let eps: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let noise = StepNoise {
        eps: Some(Tensor::new(vec![2, 2], eps)?),
        masks: Some(vec![
            MaskPair::from_keep(vec![true, false, true], 0.7),
            MaskPair::from_keep(vec![false, true], 0.7),
        ]),
    };
    Ok(TinySetup {
        model,
        batch,
        noise,
        objective: ObjectiveConfig {
            alpha: 0.1,
            keep_prob: 0.7,
            free_bits: 1.0,
            free_bits_per_dim: false,
        },
        beta: 0.5,
    })
}

/// Finite-difference check of the whole objective on the tiny model.
pub fn objective_grad_check(fault: Option<Fault>) -> Result<crate::gradcheck::GradCheckReport> {
    let s = tiny_setup(11)?;
    let cfg = GradCheckConfig {
        fault,
        ..GradCheckConfig::default()
    };
    let model = &s.model;
    grad_check(&model.params, &cfg, |tape, store| {
        let m = model.with_params(store.clone())?;
        Ok(elbo_step(tape, &m, &s.batch, &s.objective, s.beta, &s.noise)?.total)
    })
}

/// Monte-Carlo estimate of `E_q[log q(z) - log p(z)]`.
pub fn kl_monte_carlo<R: Rng + ?Sized>(post: &GaussianPosterior, n: usize, rng: &mut R) -> f64 {
    let std = post.std();
    let mut acc = 0.0;
    for _ in 0..n {
        for i in 0..post.dim() {
            let e: f64 = rng.sample(StandardNormal);
            let z = post.mu[i] + std[i] * e;
            // log q - log p, with the 2*pi terms cancelled
            acc += -0.5 * e * e - 0.5 * post.logvar[i] + 0.5 * z * z;
        }
    }
    acc / n as f64
}

/// Largest relative error between closed-form and Monte-Carlo KL over
/// `count` random posteriors of dimension 4.
pub fn kl_monte_carlo_check(count: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let post = GaussianPosterior {
            mu: (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
            logvar: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let exact = kl_diag_gaussian(&post).total;
        let mc = kl_monte_carlo(&post, samples, &mut rng);
        worst = worst.max((mc - exact).abs() / exact);
    }
    worst
}

fn bleu_cases() -> Vec<(&'static str, &'static str, f64)> {
    let bp = (1.0f64 - 5.0 / 3.0).exp();
    vec![
        ("a b c d e", "a b c d e", 1.0),
        // every unigram, bigram and trigram matches; there is no 4-gram
        ("a b c d e", "a b c", bp),
        ("a b c d", "e f g h", 1e-9),
        ("a b", "a b", 1.0),
    ]
}

pub fn run(fault: Option<Fault>) -> Result<SelfCheckReport> {
    let mut checks = Vec::new();

    let g = objective_grad_check(fault)?;
    checks.push(Check {
        name: "objective gradient vs finite differences".into(),
        passed: g.passed,
        observed: format!("max relative error {:.3e}", g.max_rel_error),
        expected: format!("< {:.0e}", g.tol),
    });

    let half = kl_diag_gaussian(&GaussianPosterior {
        mu: vec![1.0; 3],
        logvar: vec![0.0; 3],
    });
    checks.push(Check {
        name: "KL at mu=1, logvar=0".into(),
        passed: half.per_dim.iter().all(|&v| v == 0.5),
        observed: format!("{:?}", half.per_dim),
        expected: "0.5 per dimension".into(),
    });

    let worst = kl_monte_carlo_check(20, 100_000, 3);
    checks.push(Check {
        name: "closed-form KL vs Monte Carlo".into(),
        passed: worst < 0.01,
        observed: format!("max relative error {worst:.3e}"),
        expected: "< 1e-2".into(),
    });

    for (r, h, want) in bleu_cases() {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        let got = bleu(&r, &h)?;
        checks.push(Check {
            name: format!("BLEU `{}` vs `{}`", r.join(" "), h.join(" ")),
            passed: (got - want).abs() <= 1e-12 * want.max(1e-300),
            observed: format!("{got:.6e}"),
            expected: format!("{want:.6e}"),
        });
    }
    Ok(SelfCheckReport { checks })
}
