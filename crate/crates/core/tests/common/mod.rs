#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    out
}

use fdvae::model::VaeModel;

pub const BOS: usize = 2;
pub const EOS: usize = 3;

fn p<'a>(m: &'a VaeModel, name: &str) -> &'a [f64] {
    let id = m.params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    m.params.value(id).data()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W x + b` with `W` stored row-major as `out x in`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..b.len())
        .map(|o| b[o] + (0..n).map(|i| w[o * n + i] * x[i]).sum::<f64>())
        .collect()
}

fn column(table: &[f64], rows: usize, cols: usize, j: usize) -> Vec<f64> {
    (0..rows).map(|i| table[i * cols + j]).collect()
}

pub fn lstm_cell(w: &[f64], b: &[f64], x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let g = affine(w, b, &xh);
    let mut h2 = vec![0.0; d];
    let mut c2 = vec![0.0; d];
    for u in 0..d {
        c2[u] = sigmoid(g[d + u]) * c[u] + sigmoid(g[u]) * g[2 * d + u].tanh();
        h2[u] = sigmoid(g[3 * d + u]) * c2[u].tanh();
    }
    (h2, c2)
}

/// Encoder posterior `(mu, logvar)` computed directly from parameter values.
pub fn oracle_encode(m: &VaeModel, x: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let c = m.config;
    let (w, d) = (c.embed_dim, c.hidden_dim);
    let mut h = vec![0.0; d];
    let mut cell = vec![0.0; d];
    for &tok in x {
        let e = column(p(m, "encoder.embed"), w, c.vocab_size, tok);
        (h, cell) = lstm_cell(p(m, "encoder.lstm.weight"), p(m, "encoder.lstm.bias"), &e, &h, &cell);
    }
    (
        affine(p(m, "encoder.mu.weight"), p(m, "encoder.mu.bias"), &h),
        affine(p(m, "encoder.logvar.weight"), p(m, "encoder.logvar.bias"), &h),
    )
}

/// Teacher-forced log-likelihood and per-position hidden states, summing
/// `log softmax` position by position.
pub fn oracle_decode(m: &VaeModel, z: &[f64], x: &[usize], mask: Option<&[f64]>) -> (f64, Vec<Vec<f64>>) {
    let c = m.config;
    let (w, v) = (c.embed_dim, c.vocab_size);
    let mut h = affine(p(m, "decoder.z_to_h.weight"), p(m, "decoder.z_to_h.bias"), z);
    let mut cell = affine(p(m, "decoder.z_to_c.weight"), p(m, "decoder.z_to_c.bias"), z);
    let inputs: Vec<usize> = std::iter::once(BOS).chain(x.iter().copied()).collect();
    let targets: Vec<usize> = x.iter().copied().chain(std::iter::once(EOS)).collect();
    let mut ll = 0.0;
    let mut hs = Vec::new();
    for t in 0..inputs.len() {
        let mut e = column(p(m, "decoder.embed"), w, v, inputs[t]);
        if let (Some(mk), true) = (mask, t > 0) {
            e.iter_mut().for_each(|x| *x *= mk[t - 1]);
        }
        e.extend_from_slice(z);
        (h, cell) = lstm_cell(p(m, "decoder.lstm.weight"), p(m, "decoder.lstm.bias"), &e, &h, &cell);
        let logits = affine(p(m, "decoder.out.weight"), p(m, "decoder.out.bias"), &h);
        let probs: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let total: f64 = probs.iter().sum();
        ll += (probs[targets[t]] / total).ln();
        hs.push(h.clone());
    }
    (ll, hs)
}

pub fn tiny_model(seed: u64) -> VaeModel {
    let cfg = fdvae::model::ModelConfig {
        vocab_size: 6,
        embed_dim: 4,
        hidden_dim: 4,
        latent_dim: 2,
        init_scale: 0.5,
    };
    VaeModel::new(cfg, &mut rng(seed)).unwrap()
}
