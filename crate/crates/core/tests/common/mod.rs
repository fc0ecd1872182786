//! Naive reference implementations on plain slices, sharing no code with
//! the library paths they check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-pixel normalization over `c` channels of a `[c, m]` buffer, then `γ x + β`.
pub fn layer_norm(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let m = x.len() / c;
    let mut out = vec![0.0; x.len()];
    for j in 0..m {
        let col: Vec<f64> = (0..c).map(|i| x[i * m + j]).collect();
        let mean = col.iter().sum::<f64>() / c as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        for i in 0..c {
            out[i * m + j] = (col[i] - mean) / (var + eps).sqrt() * gamma[i] + beta[i];
        }
    }
    out
}

/// Selective SSM weights as plain row-major buffers.
pub struct Ssm {
    pub d: usize,
    pub n: usize,
    pub a_log: Vec<f64>,
    pub b_proj: Vec<f64>,
    pub c_proj: Vec<f64>,
    pub dt_proj: Vec<f64>,
    pub dt_bias: Vec<f64>,
}

/// Sequential selective recurrence over tokens `xs[t][d]`, zero initial state.
pub fn selective_scan(ssm: &Ssm, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (d, n) = (ssm.d, ssm.n);
    let mut h = vec![vec![0.0; n]; d];
    let mut ys = Vec::with_capacity(xs.len());
    for x in xs {
        let delta: Vec<f64> = (0..d)
            .map(|j| softplus((0..d).map(|k| x[k] * ssm.dt_proj[k * d + j]).sum::<f64>() + ssm.dt_bias[j]))
            .collect();
        let bsel: Vec<f64> = (0..n).map(|s| (0..d).map(|k| x[k] * ssm.b_proj[k * n + s]).sum()).collect();
        let csel: Vec<f64> = (0..n).map(|s| (0..d).map(|k| x[k] * ssm.c_proj[k * n + s]).sum()).collect();
        let mut y = vec![0.0; d];
        for j in 0..d {
            for s in 0..n {
                let a = -ssm.a_log[j * n + s].exp();
                h[j][s] = (delta[j] * a).exp() * h[j][s] + delta[j] * bsel[s] * x[j];
                y[j] += csel[s] * h[j][s];
            }
        }
        ys.push(y);
    }
    ys
}

/// `sigmoid(W₂ relu(W₁ mean(x) + b₁) + b₂)` applied per channel of `[c, m]`.
pub fn se(x: &[f64], c: usize, sq: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let m = x.len() / c;
    let pooled: Vec<f64> = (0..c).map(|i| x[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64).collect();
    let hidden: Vec<f64> = (0..sq)
        .map(|k| ((0..c).map(|i| w1[k * c + i] * pooled[i]).sum::<f64>() + b1[k]).max(0.0))
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|i| sigmoid((0..sq).map(|k| w2[i * sq + k] * hidden[k]).sum::<f64>() + b2[i]))
        .collect();
    x.iter().enumerate().map(|(idx, v)| v * gate[idx / m]).collect()
}

/// `K[l][d] = Σ_n c Ā^l b̄` for per-channel `[d, n]` buffers.
pub fn kernel(a: &[f64], b: &[f64], c: &[f64], d: usize, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|l| {
            (0..d)
                .map(|j| (0..n).map(|s| c[j * n + s] * a[j * n + s].powi(l as i32) * b[j * n + s]).sum())
                .collect()
        })
        .collect()
}

/// Direct `O(L²)` causal convolution `y[t] = Σ_{k ≤ t} K[k] x[t − k]`.
pub fn causal_conv(x: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = x.first().map_or(0, Vec::len);
    (0..x.len())
        .map(|t| (0..d).map(|j| (0..=t).map(|s| k[s][j] * x[t - s][j]).sum()).collect())
        .collect()
}

/// Direct time-invariant recurrence with explicit state.
pub fn lti_recurrence(a: &[f64], b: &[f64], c: &[f64], d: usize, n: usize, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; d * n];
    x.iter()
        .map(|xt| {
            (0..d)
                .map(|j| {
                    let mut y = 0.0;
                    for s in 0..n {
                        let i = j * n + s;
                        h[i] = a[i] * h[i] + b[i] * xt[j];
                        y += c[i] * h[i];
                    }
                    y
                })
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
