//! LSTM encoder `q(z|x)`, reparameterised sampling, and the z-conditioned LSTM
//! decoder `p(x|z)`.
//!
//! The decoder receives `z` three ways at once: linear projections of `z`
//! initialise its hidden and memory states, and `z` is concatenated to the
//! word embedding at every step. Word dropout, when requested, touches only
//! decoder inputs; the start sentinel is never masked.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{PaddedBatch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{mask_rows, EmbeddingTable, Linear, LstmParams, LstmState};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Weights and embeddings start uniform in `[-init_scale, init_scale]`; biases at zero.
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.vocab_size <= EOS {
            return Err(Error::config("model.vocab_size", "must include the reserved ids"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("model.init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Diagonal Gaussian `q(z|x)` for one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// A draw `z = mu + exp(logvar / 2) * eps` together with its noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

pub fn reparameterize(post: &GaussianPosterior, eps: &[f64]) -> Result<LatentSample> {
    if eps.len() != post.dim() {
        return Err(Error::Dimension {
            op: "reparameterize",
            left: vec![post.dim()],
            right: vec![eps.len()],
        });
    }
    let z = post
        .mu
        .iter()
        .zip(&post.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Ok(LatentSample {
        z,
        eps: eps.to_vec(),
    })
}

/// Posterior parameters of a batch, on a tape (`[batch x k]` each).
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Teacher-forced decoder outputs for a batch.
#[derive(Debug, Clone)]
pub struct DecodeVars {
    /// `[batch]` sentence log-likelihoods, end sentinel included.
    pub log_lik: Var,
    /// Hidden state at each decoder position, `[batch x d]` each. Position 0
    /// reads the start sentinel; position `t > 0` reads word `t - 1`.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub log_lik: f64,
    /// `d x (n + 1)`: one column per decoder position.
    pub hidden: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layers {
    enc_embed: EmbeddingTable,
    enc_lstm: LstmParams,
    mu_head: Linear,
    logvar_head: Linear,
    dec_embed: EmbeddingTable,
    dec_lstm: LstmParams,
    z_to_h: Linear,
    z_to_c: Linear,
    out_proj: Linear,
}

/// Encoder and decoder parameters. Encoder parameters are registered first
/// and tagged [`ParamGroup::Encoder`]; everything on the decoder side
/// (embeddings included) is tagged [`ParamGroup::Decoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            vocab_size: v,
            embed_dim: w,
            hidden_dim: d,
            latent_dim: k,
            init_scale: s,
        } = config;
        let mut p = ParamStore::new();
        let enc = ParamGroup::Encoder;
        let dec = ParamGroup::Decoder;
        let layers = Layers {
            enc_embed: EmbeddingTable::new(&mut p, "encoder.embed", enc, w, v, rng, s),
            enc_lstm: LstmParams::new(&mut p, "encoder.lstm", enc, w, d, rng, s),
            mu_head: Linear::new(&mut p, "encoder.mu", enc, d, k, rng, s),
            logvar_head: Linear::new(&mut p, "encoder.logvar", enc, d, k, rng, s),
            dec_embed: EmbeddingTable::new(&mut p, "decoder.embed", dec, w, v, rng, s),
            dec_lstm: LstmParams::new(&mut p, "decoder.lstm", dec, w + k, d, rng, s),
            z_to_h: Linear::new(&mut p, "decoder.z_to_h", dec, k, d, rng, s),
            z_to_c: Linear::new(&mut p, "decoder.z_to_c", dec, k, d, rng, s),
            out_proj: Linear::new(&mut p, "decoder.out", dec, d, v, rng, s),
        };
        Ok(VaeModel {
            config,
            params: p,
            layers,
        })
    }

    /// The same architecture with parameter values taken from `params`,
    /// which must have been built for this configuration.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::Contract("parameter store does not match the model".into()));
        }
        Ok(VaeModel {
            config: self.config,
            params,
            layers: self.layers,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Redraws every decoder-side parameter from the initial distribution,
    /// leaving the encoder untouched.
    pub fn reset_decoder<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let fresh = VaeModel::new(self.config, rng)?;
        for id in fresh.params.group_ids(ParamGroup::Decoder) {
            *self.params.value_mut(id) = fresh.params.value(id).clone();
        }
        Ok(())
    }

    /// Zeroes the mean and log-variance heads, giving `q(z|x) = N(0, I)` for
    /// every input.
    pub fn zero_posterior_heads(&mut self) {
        for l in [self.layers.mu_head, self.layers.logvar_head] {
            self.params.value_mut(l.weight).fill(0.0);
            self.params.value_mut(l.bias).fill(0.0);
        }
    }

    /// Parameter ids of the vocabulary projection `(weight [V x d], bias [V])`.
    pub fn output_projection(&self) -> (ParamId, ParamId) {
        (self.layers.out_proj.weight, self.layers.out_proj.bias)
    }

    fn check_tokens(&self, batch: &PaddedBatch) -> Result<()> {
        let v = self.vocab_size();
        for r in 0..batch.len() {
            let s = batch.sentence(r);
            if s.is_empty() {
                return Err(Error::Input("cannot encode an empty sentence".into()));
            }
            if let Some(&bad) = s.iter().find(|&&id| id >= v) {
                return Err(Error::Index {
                    op: "encode",
                    index: bad,
                    size: v,
                });
            }
        }
        Ok(())
    }

    /// Runs the encoder over a padded batch. Each row's posterior is read from
    /// the hidden state after its own last token.
    pub fn encode_batch(&self, tape: &mut Tape, batch: &PaddedBatch) -> Result<PosteriorVars> {
        self.check_tokens(batch)?;
        let b = batch.len();
        let d = self.config.hidden_dim;
        let l = &self.layers;
        let mut state = LstmState {
            h: tape.constant(Tensor::zeros(&[b, d])),
            c: tape.constant(Tensor::zeros(&[b, d])),
        };
        for t in 0..batch.max_len() {
            let ids: Vec<usize> = batch.tokens.iter().map(|row| row[t]).collect();
            let e = l.enc_embed.lookup(tape, &self.params, &ids)?;
            let next = l.enc_lstm.step(tape, &self.params, &[e], state)?;
            let live = batch.position_mask(t);
            if live.iter().all(|&m| m == 1.0) {
                state = next;
            } else {
                let done: Vec<f64> = live.iter().map(|m| 1.0 - m).collect();
                let carry = |tape: &mut Tape, new: Var, old: Var| -> Result<Var> {
                    let a = mask_rows(tape, new, &live)?;
                    let c = mask_rows(tape, old, &done)?;
                    tape.add(a, c)
                };
                state = LstmState {
                    h: carry(tape, next.h, state.h)?,
                    c: carry(tape, next.c, state.c)?,
                };
            }
        }
        Ok(PosteriorVars {
            mu: l.mu_head.forward(tape, &self.params, state.h)?,
            logvar: l.logvar_head.forward(tape, &self.params, state.h)?,
        })
    }

    /// `z = mu + exp(logvar / 2) * eps` on the tape; `eps` (`[batch x k]`) is a constant.
    pub fn reparameterize_vars(
        &self,
        tape: &mut Tape,
        post: PosteriorVars,
        eps: &Tensor,
    ) -> Result<Var> {
        let half = tape.scale(post.logvar, 0.5);
        let std = tape.exp(half)?;
        let e = tape.constant(eps.clone());
        let noise = tape.mul(std, e)?;
        tape.add(post.mu, noise)
    }

    /// Teacher-forced decoding of a padded batch given latent codes `z`
    /// (`[batch x k]`). `word_masks[r]`, when given, has one 0/1 entry per word
    /// of sentence `r` and multiplies that word's input embedding.
    pub fn decode_batch(
        &self,
        tape: &mut Tape,
        z: Var,
        batch: &PaddedBatch,
        word_masks: Option<&[Vec<f64>]>,
    ) -> Result<DecodeVars> {
        self.check_tokens(batch)?;
        let b = batch.len();
        if tape.shape(z) != [b, self.config.latent_dim] {
            return Err(Error::Dimension {
                op: "decode",
                left: tape.shape(z).to_vec(),
                right: vec![b, self.config.latent_dim],
            });
        }
        if let Some(masks) = word_masks {
            let bad = masks.len() != b
                || masks.iter().zip(&batch.lengths).any(|(m, &n)| m.len() != n);
            if bad {
                return Err(Error::Dimension {
                    op: "decode_mask",
                    left: batch.lengths.clone(),
                    right: masks.iter().map(Vec::len).collect(),
                });
            }
        }
        let l = &self.layers;
        let positions = batch.max_len() + 1;
        let mut state = LstmState {
            h: l.z_to_h.forward(tape, &self.params, z)?,
            c: l.z_to_c.forward(tape, &self.params, z)?,
        };
        let mut hidden = Vec::with_capacity(positions);
        let mut targets = Vec::with_capacity(positions * b);
        let mut weights = Vec::with_capacity(positions * b);
        for t in 0..positions {
            let ids: Vec<usize> = batch
                .tokens
                .iter()
                .map(|row| if t == 0 { BOS } else { row[t - 1] })
                .collect();
            let mut e = l.dec_embed.lookup(tape, &self.params, &ids)?;
            if let (Some(masks), true) = (word_masks, t > 0) {
                let m: Vec<f64> = masks
                    .iter()
                    .map(|m| m.get(t - 1).copied().unwrap_or(1.0))
                    .collect();
                e = mask_rows(tape, e, &m)?;
            }
            state = l.dec_lstm.step(tape, &self.params, &[e, z], state)?;
            hidden.push(state.h);
            for (r, &n) in batch.lengths.iter().enumerate() {
                match t.cmp(&n) {
                    std::cmp::Ordering::Less => {
                        targets.push(batch.tokens[r][t]);
                        weights.push(1.0);
                    }
                    std::cmp::Ordering::Equal => {
                        targets.push(EOS);
                        weights.push(1.0);
                    }
                    std::cmp::Ordering::Greater => {
                        targets.push(PAD);
                        weights.push(0.0);
                    }
                }
            }
        }
        let stacked = tape.stack_rows(&hidden)?;
        let logits = l.out_proj.forward(tape, &self.params, stacked)?;
        let nll = tape.cross_entropy(logits, &targets, &weights)?;
        let grid = tape.reshape(nll, &[positions, b])?;
        let per_sentence = tape.sum_axis(grid, 0)?;
        let log_lik = tape.neg(per_sentence);
        Ok(DecodeVars { log_lik, hidden })
    }

    /// Posterior of one sentence.
    pub fn encode(&self, x: &[usize]) -> Result<GaussianPosterior> {
        let batch = PaddedBatch::single(x)?;
        let mut tape = Tape::inference();
        let post = self.encode_batch(&mut tape, &batch)?;
        Ok(GaussianPosterior {
            mu: tape.value(post.mu).data().to_vec(),
            logvar: tape.value(post.logvar).data().to_vec(),
        })
    }

    /// Posteriors of many sentences, evaluated in batches of `batch_size`.
    pub fn encode_all(&self, sentences: &[Vec<usize>], batch_size: usize) -> Result<Vec<GaussianPosterior>> {
        let k = self.latent_dim();
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(batch_size.max(1)) {
            let rows: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            let batch = PaddedBatch::from_sentences(&rows, (0..rows.len()).collect())?;
            let mut tape = Tape::inference();
            let post = self.encode_batch(&mut tape, &batch)?;
            let (mu, lv) = (tape.value(post.mu).data(), tape.value(post.logvar).data());
            for r in 0..chunk.len() {
                out.push(GaussianPosterior {
                    mu: mu[r * k..(r + 1) * k].to_vec(),
                    logvar: lv[r * k..(r + 1) * k].to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Teacher-forced log-likelihood and hidden states of one sentence.
    pub fn decode_teacher_forced(
        &self,
        z: &[f64],
        x: &[usize],
        mask: Option<&[f64]>,
    ) -> Result<TeacherForced> {
        let batch = PaddedBatch::single(x)?;
        let mut tape = Tape::inference();
        let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
        let masks = mask.map(|m| vec![m.to_vec()]);
        let out = self.decode_batch(&mut tape, zv, &batch, masks.as_deref())?;
        let d = self.config.hidden_dim;
        let n = out.hidden.len();
        let mut hidden = vec![0.0; d * n];
        for (t, h) in out.hidden.iter().enumerate() {
            for (i, v) in tape.value(*h).data().iter().enumerate() {
                hidden[i * n + t] = *v;
            }
        }
        Ok(TeacherForced {
            log_lik: tape.value(out.log_lik).item(),
            hidden: Tensor::new(vec![d, n], hidden)?,
        })
    }

    /// Log-likelihood of `x` under each of the latent codes in `zs`
    /// (`[m x k]`), computed as one batch.
    pub fn log_likelihoods(&self, zs: &Tensor, x: &[usize]) -> Result<Vec<f64>> {
        let m = zs.dims2().0;
        let rows: Vec<&[usize]> = vec![x; m];
        let batch = PaddedBatch::from_sentences(&rows, (0..m).collect())?;
        let mut tape = Tape::inference();
        let zv = tape.constant(zs.clone());
        let out = self.decode_batch(&mut tape, zv, &batch, None)?;
        Ok(tape.value(out.log_lik).data().to_vec())
    }

    /// Greedy decoding for each row of `zs` (`[m x k]`): start from the start
    /// sentinel, feed back the arg-max token, stop at the end sentinel or after
    /// `max_len` words. Padding and the start sentinel are never emitted; ties
    /// resolve to the lowest id.
    pub fn decode_greedy_batch(&self, zs: &Tensor, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let (m, k) = zs.dims2();
        if k != self.latent_dim() {
            return Err(Error::Dimension {
                op: "decode_greedy",
                left: zs.shape().to_vec(),
                right: vec![m, self.latent_dim()],
            });
        }
        let l = &self.layers;
        let v = self.vocab_size();
        let mut tape = Tape::inference();
        let z = tape.constant(zs.clone());
        let mut state = LstmState {
            h: l.z_to_h.forward(&mut tape, &self.params, z)?,
            c: l.z_to_c.forward(&mut tape, &self.params, z)?,
        };
        let mut prev = vec![BOS; m];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut done = vec![false; m];
        for _ in 0..=max_len {
            let e = l.dec_embed.lookup(&mut tape, &self.params, &prev)?;
            state = l.dec_lstm.step(&mut tape, &self.params, &[e, z], state)?;
            let logits = l.out_proj.forward(&mut tape, &self.params, state.h)?;
            let lv = tape.value(logits).data();
            for r in 0..m {
                if done[r] {
                    continue;
                }
                let row = &lv[r * v..(r + 1) * v];
                let mut best = EOS;
                for (id, &score) in row.iter().enumerate() {
                    if id == PAD || id == BOS {
                        continue;
                    }
                    if score > row[best] || (score == row[best] && id < best) {
                        best = id;
                    }
                }
                if best == EOS || out[r].len() == max_len {
                    done[r] = true;
                } else {
                    out[r].push(best);
                }
                prev[r] = best;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub fn decode_greedy(&self, z: &[f64], max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        let zs = Tensor::new(vec![1, z.len()], z.to_vec())?;
        Ok(self.decode_greedy_batch(&zs, max_len)?.remove(0))
    }
}
