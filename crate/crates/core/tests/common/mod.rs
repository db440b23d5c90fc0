//! Naive reference implementations used as independent oracles.
#![allow(dead_code)]

use hiformer::tensor::{ParamId, ParamStore, Scalar, Tensor};
use hiformer::layers::{LayerNorm, Linear, MultiHeadAttention};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Sets every parameter to uniform(-scale, scale) so that no block is
/// trivially close to the identity.
pub fn randomize(store: &mut ParamStore<f64>, scale: f64, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, uniform(&shape, scale, rng)).unwrap();
    }
}

/// `(N, T, D)` tensor to per-sample token rows.
pub fn samples(t: &Tensor<f64>) -> Vec<Rows> {
    let (n, len, d) = (t.dim(0), t.dim(1), t.dim(2));
    (0..n)
        .map(|b| (0..len).map(|i| t.data()[(b * len + i) * d..(b * len + i + 1) * d].to_vec()).collect())
        .collect()
}

pub fn max_abs(a: &[Rows], b: &[Rows]) -> f64 {
    let mut m: f64 = 0.0;
    assert_eq!(a.len(), b.len());
    for (sa, sb) in a.iter().zip(b) {
        assert_eq!(sa.len(), sb.len());
        for (ra, rb) in sa.iter().zip(sb) {
            assert_eq!(ra.len(), rb.len());
            for (x, y) in ra.iter().zip(rb) {
                m = m.max((x - y).abs());
            }
        }
    }
    m
}

pub fn layer_norm(store: &ParamStore<f64>, ln: &LayerNorm, rows: &Rows) -> Rows {
    let gamma = store.value(ln.gamma).data();
    let beta = store.value(ln.beta).data();
    rows.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(i, v)| (v - mean) * inv * gamma[i] + beta[i]).collect()
        })
        .collect()
}

pub fn linear(store: &ParamStore<f64>, l: &Linear, rows: &Rows) -> Rows {
    let w = store.value(l.weight);
    let (din, dout) = (w.dim(0), w.dim(1));
    let b = l.bias.map(|b| store.value(b).data().to_vec()).unwrap_or_else(|| vec![0.0; dout]);
    rows.iter()
        .map(|r| {
            assert_eq!(r.len(), din);
            (0..dout)
                .map(|o| b[o] + (0..din).map(|i| r[i] * w.data()[i * dout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + <f64 as Scalar>::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn mlp(store: &ParamStore<f64>, m: &hiformer::layers::Mlp, rows: &Rows) -> Rows {
    let h: Rows = linear(store, &m.fc1, rows).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(store, &m.fc2, &h)
}

/// Per-head attention probabilities `[head][query][key]` of `rows` with an
/// additive `bias(head, q, k)`.
pub fn mha_probabilities(
    store: &ParamStore<f64>,
    mha: &MultiHeadAttention,
    rows: &Rows,
    bias: &dyn Fn(usize, usize, usize) -> f64,
) -> Vec<Rows> {
    let d = mha.dim;
    let hd = d / mha.heads;
    let qkv = linear(store, &mha.qkv, rows);
    let scale = 1.0 / (hd as f64).sqrt();
    (0..mha.heads)
        .map(|h| {
            let q = |i: usize, j: usize| qkv[i][h * hd + j];
            let k = |i: usize, j: usize| qkv[i][d + h * hd + j];
            (0..rows.len())
                .map(|a| {
                    let scores: Vec<f64> = (0..rows.len())
                        .map(|b| scale * (0..hd).map(|j| q(a, j) * k(b, j)).sum::<f64>() + bias(h, a, b))
                        .collect();
                    softmax(&scores)
                })
                .collect()
        })
        .collect()
}

/// Multi-head self-attention including the output projection.
pub fn mha(
    store: &ParamStore<f64>,
    mha: &MultiHeadAttention,
    rows: &Rows,
    bias: &dyn Fn(usize, usize, usize) -> f64,
) -> Rows {
    let d = mha.dim;
    let hd = d / mha.heads;
    let qkv = linear(store, &mha.qkv, rows);
    let probs = mha_probabilities(store, mha, rows, bias);
    let mut out = vec![vec![0.0; d]; rows.len()];
    for (h, p) in probs.iter().enumerate() {
        for a in 0..rows.len() {
            for b in 0..rows.len() {
                for j in 0..hd {
                    out[a][h * hd + j] += p[a][b] * qkv[b][2 * d + h * hd + j];
                }
            }
        }
    }
    linear(store, &mha.proj, &out)
}

pub mod masks;
pub mod window;
