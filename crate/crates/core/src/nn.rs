//! Embedding tables, LSTM, affine layers and word-dropout masks.
//!
//! Sequences are processed position by position over a batch: the input at
//! position `t` is a `[batch x features]` matrix whose row `r` belongs to
//! sentence `r`. For a single sentence (`batch = 1`) the list of per-position
//! rows is exactly the column layout `features x n` used in the model equations.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Uniform `[-scale, scale]` initialisation.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Word-embedding matrix of shape `dim x vocab`; column `j` embeds token `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub dim: usize,
    pub vocab: usize,
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        vocab: usize,
        rng: &mut R,
        scale: f64,
    ) -> Self {
        let table = store.add(name, group, uniform_init(rng, &[dim, vocab], scale));
        EmbeddingTable { table, dim, vocab }
    }

    /// `[ids.len() x dim]` rows of embeddings.
    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table);
        tape.embed_columns(t, ids)
    }
}

/// Affine map `W x + b` with `W: out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
        scale: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_init(rng, &[out_dim, in_dim], scale),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        linear(tape, x, w, b)
    }
}

/// `weight . x + bias` applied to every row of `x` (`[batch x in]`).
pub fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    tape.linear(x, weight, Some(bias))
}

/// One-layer LSTM. Gates are computed from the concatenation `[input; hidden]`
/// by a single `4d x (in + d)` matrix, in the row-block order input, forget,
/// candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
        scale: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform_init(rng, &[4 * hidden_dim, input_dim + hidden_dim], scale),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[4 * hidden_dim]));
        LstmParams {
            weight,
            bias,
            input_dim,
            hidden_dim,
        }
    }

    /// Advances one position. `inputs` are concatenated column-wise into the
    /// cell input, so the latent code can ride along without a copy of the
    /// embedding.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        state: LstmState,
    ) -> Result<LstmState> {
        let d = self.hidden_dim;
        let width: usize = inputs.iter().map(|v| tape.shape(*v)[1]).sum();
        if width != self.input_dim {
            return Err(Error::Dimension {
                op: "lstm_step",
                left: vec![self.input_dim],
                right: vec![width],
            });
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let mut parts = inputs.to_vec();
        parts.push(state.h);
        let xh = tape.concat_cols(&parts)?;
        let gates = tape.linear(xh, w, Some(b))?;
        let i_pre = tape.slice_cols(gates, 0, d)?;
        let f_pre = tape.slice_cols(gates, d, d)?;
        let g_pre = tape.slice_cols(gates, 2 * d, d)?;
        let o_pre = tape.slice_cols(gates, 3 * d, d)?;
        let i = tape.sigmoid(i_pre);
        let f = tape.sigmoid(f_pre);
        let g = tape.tanh(g_pre);
        let o = tape.sigmoid(o_pre);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Runs the LSTM over every position and returns the hidden state at each.
pub fn lstm_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    inputs: &[Var],
    h0: Var,
    c0: Var,
    params: &LstmParams,
) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Err(Error::Input("lstm_sequence needs at least one position".into()));
    }
    let mut state = LstmState { h: h0, c: c0 };
    let mut hidden = Vec::with_capacity(inputs.len());
    for &x in inputs {
        state = params.step(tape, store, &[x], state)?;
        hidden.push(state.h);
    }
    Ok(hidden)
}

/// Complementary word-dropout masks drawn once: `keep[j]` and `1 - keep[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    keep: Vec<bool>,
    keep_prob: f64,
}

impl MaskPair {
    pub fn from_keep(keep: Vec<bool>, keep_prob: f64) -> Self {
        MaskPair { keep, keep_prob }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    /// The drawn mask `d` as 0/1 values.
    pub fn mask(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    /// `1 - d`.
    pub fn complement(&self) -> Vec<f64> {
        self.keep.iter().map(|&k| if k { 0.0 } else { 1.0 }).collect()
    }

    /// The pair with roles exchanged.
    pub fn swapped(&self) -> MaskPair {
        MaskPair {
            keep: self.keep.iter().map(|k| !k).collect(),
            keep_prob: 1.0 - self.keep_prob,
        }
    }
}

/// Draws `d ~ Bernoulli(keep_prob)^n`.
pub fn sample_mask_pair<R: Rng + ?Sized>(n: usize, keep_prob: f64, rng: &mut R) -> Result<MaskPair> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::config(
            "keep_prob",
            format!("must lie in [0, 1], got {keep_prob}"),
        ));
    }
    let keep = (0..n).map(|_| rng.random::<f64>() < keep_prob).collect();
    Ok(MaskPair::from_keep(keep, keep_prob))
}

/// Zeroes column `j` of `embeddings` (`w x n`) wherever `mask[j] == 0`.
pub fn apply_mask(tape: &mut Tape, embeddings: Var, mask: &[f64]) -> Result<Var> {
    let shape = tape.shape(embeddings).to_vec();
    let (w, n) = match shape.as_slice() {
        [w, n] => (*w, *n),
        _ => {
            return Err(Error::Dimension {
                op: "apply_mask",
                left: shape,
                right: vec![mask.len()],
            })
        }
    };
    if n != mask.len() {
        return Err(Error::Dimension {
            op: "apply_mask",
            left: shape,
            right: vec![mask.len()],
        });
    }
    let data = (0..w).flat_map(|_| mask.iter().copied()).collect();
    let m = tape.constant(Tensor::new(vec![w, n], data)?);
    tape.mul(embeddings, m)
}

/// Scales row `r` of `x` by `row_mask[r]`; the batched counterpart of
/// [`apply_mask`] for one sequence position.
pub fn mask_rows(tape: &mut Tape, x: Var, row_mask: &[f64]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (rows, cols) = match shape.as_slice() {
        [r, c] if *r == row_mask.len() => (*r, *c),
        _ => {
            return Err(Error::Dimension {
                op: "mask_rows",
                left: shape,
                right: vec![row_mask.len()],
            })
        }
    };
    if row_mask.iter().all(|&m| m == 1.0) {
        return Ok(x);
    }
    let data = (0..rows)
        .flat_map(|r| std::iter::repeat_n(row_mask[r], cols))
        .collect();
    let m = tape.constant(Tensor::new(vec![rows, cols], data)?);
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_pair_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = sample_mask_pair(7, 1.0, &mut rng).unwrap();
        assert_eq!(all.mask(), vec![1.0; 7]);
        assert_eq!(all.complement(), vec![0.0; 7]);
        let none = sample_mask_pair(7, 0.0, &mut rng).unwrap();
        assert_eq!(none.mask(), vec![0.0; 7]);
        assert_eq!(none.complement(), vec![1.0; 7]);
    }

    #[test]
    fn mask_pair_rejects_bad_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_mask_pair(3, 1.5, &mut rng),
            Err(Error::Config { .. })
        ));
        assert!(sample_mask_pair(3, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mask_pair_half_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let pair = sample_mask_pair(10_000, 0.5, &mut rng).unwrap();
        let mean = pair.mask().iter().sum::<f64>() / 10_000.0;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
        for (d, c) in pair.mask().iter().zip(pair.complement()) {
            assert_eq!(d + c, 1.0);
        }
    }

    #[test]
    fn apply_mask_columns() {
        let mut tape = Tape::new();
        let e = tape.input(Tensor::matrix(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let kept = apply_mask(&mut tape, e, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(tape.value(kept).data(), tape.value(e).data());
        let zero = apply_mask(&mut tape, e, &[0.0, 0.0, 0.0]).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
        let mid = apply_mask(&mut tape, e, &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(tape.value(mid).data(), &[1.0, 0.0, 3.0, 4.0, 0.0, 6.0]);
        assert!(matches!(
            apply_mask(&mut tape, e, &[1.0, 0.0]),
            Err(Error::Dimension { .. })
        ));

        // gradient reaches only kept columns
        let loss = tape.sum(mid);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(e).unwrap(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(&[vec![1.5, -2.0, 0.25]]).unwrap());
        let eye = tape.constant(Tensor::eye(3));
        let zero_b = tape.constant(Tensor::zeros(&[3]));
        let y = linear(&mut tape, x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);

        let zero_w = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::vector(vec![0.5, -1.0]));
        let y = linear(&mut tape, x, zero_w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0]);

        let bad_w = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            linear(&mut tape, x, bad_w, b),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lstm_zero_weights_gives_zero_hidden() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lstm = LstmParams::new(&mut store, "lstm", ParamGroup::Decoder, 2, 3, &mut rng, 0.0);
        let mut tape = Tape::new();
        let inputs: Vec<Var> = (0..4)
            .map(|t| tape.constant(Tensor::matrix(&[vec![t as f64, -1.0]]).unwrap()))
            .collect();
        let h0 = tape.constant(Tensor::zeros(&[1, 3]));
        let c0 = tape.constant(Tensor::zeros(&[1, 3]));
        let hs = lstm_sequence(&mut tape, &store, &inputs, h0, c0, &lstm).unwrap();
        for h in hs {
            assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lstm_rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lstm = LstmParams::new(&mut store, "lstm", ParamGroup::Decoder, 2, 3, &mut rng, 0.1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5]));
        let h0 = tape.constant(Tensor::zeros(&[1, 3]));
        let c0 = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            lstm_sequence(&mut tape, &store, &[x], h0, c0, &lstm),
            Err(Error::Dimension { .. })
        ));
        assert!(lstm_sequence(&mut tape, &store, &[], h0, c0, &lstm).is_err());
    }
}
