//! Evaluation metrics: Monte-Carlo reconstruction NLL, perplexity, active
//! units, mutual information between `x` and `z`, and corpus BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianPosterior, VaeModel};
use crate::objectives::kl_diag_gaussian;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Independent generator for item `index` of a per-item computation, so
/// results do not depend on evaluation order or thread count.
pub fn item_rng(seed: u64, salt: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

const NLL_SALT: u64 = 1;
const MI_SALT: u64 = 2;
const BLEU_SALT: u64 = 3;

fn draw_latents<R: Rng + ?Sized>(post: &GaussianPosterior, n: usize, rng: &mut R) -> Result<Tensor> {
    let std = post.std();
    let k = post.dim();
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        for i in 0..k {
            let e: f64 = rng.sample(StandardNormal);
            data.push(post.mu[i] + std[i] * e);
        }
    }
    Tensor::new(vec![n, k], data)
}

/// Mean of `-log p(x|z)` over `n_samples` draws `z ~ q(z|x)`.
pub fn reconstruction_nll<R: Rng + ?Sized>(
    model: &VaeModel,
    x: &[usize],
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::config("nll_samples", "must be at least 1"));
    }
    let post = model.encode(x)?;
    let zs = draw_latents(&post, n_samples, rng)?;
    let lls = model.log_likelihoods(&zs, x)?;
    Ok(-lls.iter().sum::<f64>() / n_samples as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllSummary {
    pub per_sentence: Vec<f64>,
    pub total_nll: f64,
    /// Predicted tokens: every word plus the end sentinel.
    pub total_tokens: usize,
}

impl NllSummary {
    pub fn mean(&self) -> f64 {
        self.total_nll / self.per_sentence.len() as f64
    }

    pub fn perplexity(&self) -> f64 {
        perplexity(self.total_nll, self.total_tokens)
    }
}

/// [`reconstruction_nll`] for every sentence, with sentence `i` drawing from
/// its own generator.
pub fn corpus_nll(
    model: &VaeModel,
    sentences: &[Vec<usize>],
    n_samples: usize,
    seed: u64,
) -> Result<NllSummary> {
    if sentences.is_empty() {
        return Err(Error::Input("cannot evaluate an empty corpus".into()));
    }
    let per_sentence = sentences
        .par_iter()
        .enumerate()
        .map(|(i, x)| reconstruction_nll(model, x, n_samples, &mut item_rng(seed, NLL_SALT, i)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(NllSummary {
        total_nll: per_sentence.iter().sum(),
        total_tokens: sentences.iter().map(|s| s.len() + 1).sum(),
        per_sentence,
    })
}

/// Corpus-pooled perplexity `exp(total_nll / total_tokens)`.
pub fn perplexity(total_nll: f64, total_tokens: usize) -> f64 {
    (total_nll / total_tokens as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveUnits {
    pub count: usize,
    /// Sample variance (denominator `N - 1`) of each posterior-mean coordinate.
    pub variances: Vec<f64>,
    pub threshold: f64,
}

/// Counts latent dimensions whose posterior mean varies across the corpus by
/// more than `threshold`.
pub fn active_units(posteriors: &[GaussianPosterior], threshold: f64) -> Result<ActiveUnits> {
    if posteriors.len() < 2 {
        return Err(Error::Input(format!(
            "active units need at least 2 sentences, got {}",
            posteriors.len()
        )));
    }
    let n = posteriors.len() as f64;
    let k = posteriors[0].dim();
    let variances: Vec<f64> = (0..k)
        .map(|u| {
            let mean = posteriors.iter().map(|p| p.mu[u]).sum::<f64>() / n;
            posteriors
                .iter()
                .map(|p| (p.mu[u] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect();
    Ok(ActiveUnits {
        count: variances.iter().filter(|&&v| v > threshold).count(),
        variances,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub raw: f64,
    /// The raw estimate was negative and has been clamped to zero.
    pub clamped: bool,
}

fn log_normal_diag(z: &[f64], mu: &[f64], logvar: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..z.len() {
        let d = z[i] - mu[i];
        acc += LN_2PI + logvar[i] + d * d * (-logvar[i]).exp();
    }
    -0.5 * acc
}

/// Estimates `I(x; z)` under `q(z|x)` and the empirical data distribution.
///
/// The quantity is `E_x[KL(q(z|x) || p)] - E_{x, z~q(z|x)}[log q_agg(z) - log p(z)]`,
/// where `q_agg` is the mixture of the given posteriors (or of the first
/// `aggregate_limit` of them). The prior terms cancel inside the expectation,
/// so each draw contributes `log q(z|x) - log q_agg(z)`.
pub fn mutual_information(
    posteriors: &[GaussianPosterior],
    n_z_samples: usize,
    aggregate_limit: Option<usize>,
    seed: u64,
) -> Result<MiEstimate> {
    if posteriors.is_empty() {
        return Err(Error::Input("mutual information needs a nonempty corpus".into()));
    }
    if n_z_samples == 0 {
        return Err(Error::config("mi_samples", "must be at least 1"));
    }
    let m = aggregate_limit.map_or(posteriors.len(), |l| l.clamp(1, posteriors.len()));
    let comps = &posteriors[..m];
    let ln_m = (m as f64).ln();
    let per_sentence = posteriors
        .par_iter()
        .enumerate()
        .map(|(i, post)| {
            let mut rng = item_rng(seed, MI_SALT, i);
            let zs = draw_latents(post, n_z_samples, &mut rng)?;
            let mut acc = 0.0;
            let mut logs = vec![0.0; m];
            for s in 0..n_z_samples {
                let z = zs.row(s);
                for (l, c) in logs.iter_mut().zip(comps) {
                    *l = log_normal_diag(z, &c.mu, &c.logvar);
                }
                let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                acc += log_normal_diag(z, &post.mu, &post.logvar) - (lse - ln_m);
            }
            Ok(acc / n_z_samples as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let raw = per_sentence.iter().sum::<f64>() / posteriors.len() as f64;
    Ok(MiEstimate {
        value: raw.max(0.0),
        raw,
        clamped: raw < 0.0,
    })
}

/// Mean closed-form KL of the posteriors to the prior.
pub fn mean_kl(posteriors: &[GaussianPosterior]) -> f64 {
    posteriors
        .iter()
        .map(|p| kl_diag_gaussian(p).total)
        .sum::<f64>()
        / posteriors.len() as f64
}

/// Precision used for an n-gram order with candidates but no matches.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    /// One modified precision per n-gram order present in the hypotheses.
    pub precisions: Vec<f64>,
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 over `(reference, hypothesis)` pairs: clipped n-gram matches
/// and totals are pooled over the corpus before taking precisions. The
/// geometric mean runs over the orders `n` for which the hypotheses contain
/// any n-gram, so a short sentence scored against itself gets 1.
pub fn corpus_bleu<T: Eq + Hash, R: AsRef<[T]>, H: AsRef<[T]>>(pairs: &[(R, H)]) -> Result<BleuScore> {
    if pairs.is_empty() {
        return Err(Error::Input("BLEU needs at least one sentence pair".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (i, (r, h)) in pairs.iter().enumerate() {
        let (r, h) = (r.as_ref(), h.as_ref());
        if r.is_empty() {
            return Err(Error::Input(format!("reference {i} is empty")));
        }
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    // orders longer than every hypothesis have no n-grams and are left out
    let orders = totals.iter().take_while(|&&t| t > 0).count();
    let precisions: Vec<f64> = (0..orders)
        .map(|n| {
            if matches[n] == 0 {
                BLEU_EPSILON
            } else {
                matches[n] as f64 / totals[n] as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if orders == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / orders as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// BLEU-4 of a single pair.
pub fn bleu<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    Ok(corpus_bleu(&[(reference, hypothesis)])?.score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub nll_samples: usize,
    pub mi_samples: usize,
    /// Use only the first this-many posteriors as aggregate-posterior components.
    pub mi_aggregate_limit: Option<usize>,
    pub au_threshold: f64,
    pub max_decode_len: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            nll_samples: 100,
            mi_samples: 10,
            mi_aggregate_limit: None,
            au_threshold: 0.01,
            max_decode_len: 30,
            batch_size: 64,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("eval.nll_samples", self.nll_samples),
            ("eval.mi_samples", self.mi_samples),
            ("eval.max_decode_len", self.max_decode_len),
            ("eval.batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(self.au_threshold >= 0.0) {
            return Err(Error::config("eval.au_threshold", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub ppl: f64,
    pub au: usize,
    pub mi: f64,
    pub mi_raw: f64,
    pub mi_clamped: bool,
    pub bleu: f64,
    pub kl: f64,
    pub n_sentences: usize,
    pub n_tokens: usize,
    pub latent_dim: usize,
    pub au_variances: Vec<f64>,
    pub seed: u64,
    pub config: EvalConfig,
}

impl MetricsReport {
    /// One table row: `NLL PPL AU MI BLEU` (BLEU in percent).
    pub fn row(&self) -> String {
        format!(
            "{:>8.2} {:>8.2} {:>4} {:>6.3} {:>6.2}",
            self.nll,
            self.ppl,
            self.au,
            self.mi,
            100.0 * self.bleu
        )
    }

    pub fn header() -> String {
        format!("{:>8} {:>8} {:>4} {:>6} {:>6}", "NLL", "PPL", "AU", "MI", "BLEU")
    }
}

/// Greedy reconstructions from one `z ~ q(z|x)` per sentence.
pub fn reconstruct(
    model: &VaeModel,
    posteriors: &[GaussianPosterior],
    max_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let k = model.latent_dim();
    let starts: Vec<usize> = (0..posteriors.len()).step_by(batch_size.max(1)).collect();
    let chunks = starts
        .par_iter()
        .map(|&start| {
            let end = (start + batch_size).min(posteriors.len());
            let mut data = Vec::with_capacity((end - start) * k);
            for (i, post) in posteriors.iter().enumerate().take(end).skip(start) {
                let z = draw_latents(post, 1, &mut item_rng(seed, BLEU_SALT, i))?;
                data.extend_from_slice(z.data());
            }
            let zs = Tensor::new(vec![end - start, k], data)?;
            model.decode_greedy_batch(&zs, max_len)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Full metric suite on one corpus split.
pub fn evaluate(
    model: &VaeModel,
    sentences: &[Vec<usize>],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if sentences.is_empty() {
        return Err(Error::Input("cannot evaluate an empty corpus".into()));
    }
    let nll = corpus_nll(model, sentences, cfg.nll_samples, seed)?;
    let posteriors = model.encode_all(sentences, cfg.batch_size)?;
    let au = active_units(&posteriors, cfg.au_threshold)?;
    let mi = mutual_information(&posteriors, cfg.mi_samples, cfg.mi_aggregate_limit, seed)?;
    let hyps = reconstruct(model, &posteriors, cfg.max_decode_len, cfg.batch_size, seed)?;
    let pairs: Vec<(&[usize], &[usize])> = sentences
        .iter()
        .zip(&hyps)
        .map(|(r, h)| (r.as_slice(), h.as_slice()))
        .collect();
    let bleu = corpus_bleu(&pairs)?;
    let report = MetricsReport {
        nll: nll.mean(),
        ppl: nll.perplexity(),
        au: au.count,
        mi: mi.value,
        mi_raw: mi.raw,
        mi_clamped: mi.clamped,
        bleu: bleu.score,
        kl: mean_kl(&posteriors),
        n_sentences: sentences.len(),
        n_tokens: nll.total_tokens,
        latent_dim: model.latent_dim(),
        au_variances: au.variances,
        seed,
        config: *cfg,
    };
    let finite = [report.nll, report.ppl, report.mi, report.bleu, report.kl]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Domain {
            op: "evaluate",
            detail: "a metric evaluated to a non-finite value".into(),
        });
    }
    Ok(report)
}
