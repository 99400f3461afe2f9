//! Independent reference implementations used as test oracles, plus the
//! small fixtures several test files share.
#![allow(dead_code)]

pub mod criteria;

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use spkguard_core::nn::{Activation, Architecture, Mlp, NetworkParams};

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// Network forward pass written out longhand.

/// Output and relu sign pattern of a plain loop-based forward pass.
pub fn mlp_forward(mlp: &Mlp<f64>, x: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let mut pattern = Vec::new();
    let mut h = x.clone();
    for layer in &mlp.layers {
        let (n, d_in) = h.dim();
        let d_out = layer.weights.ncols();
        let mut z = Array2::<f64>::zeros((n, d_out));
        for r in 0..n {
            for j in 0..d_out {
                let mut acc = layer.bias[j];
                for i in 0..d_in {
                    acc += h[[r, i]] * layer.weights[[i, j]];
                }
                z[[r, j]] = acc;
            }
        }
        h = match layer.activation {
            Activation::Relu => {
                pattern.extend(z.iter().map(|&v| v > 0.0));
                z.mapv(|v| v.max(0.0))
            }
            Activation::Linear => z,
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - m).exp());
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                z
            }
        };
    }
    (h, pattern)
}

fn nll(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    -labels
        .iter()
        .enumerate()
        .map(|(r, &l)| probs[[r, l]].max(1e-12).ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// `(L_cond, L_spk, relu pattern)` of the full network.
pub fn losses(p: &NetworkParams<f64>, x: &Array2<f64>, cond: &[usize], spk: &[usize]) -> (f64, f64, Vec<bool>) {
    let (emb, mut pat) = mlp_forward(&p.encoder, x);
    let (pc, pat_c) = mlp_forward(&p.cond_head, &emb);
    let (ps, pat_s) = mlp_forward(&p.spk_head, &emb);
    pat.extend(pat_c);
    pat.extend(pat_s);
    (nll(&pc, cond), nll(&ps, spk), pat)
}

pub fn composite(p: &NetworkParams<f64>, x: &Array2<f64>, cond: &[usize], spk: &[usize], lambda: f64) -> (f64, Vec<bool>) {
    let (lc, ls, pat) = losses(p, x, cond, spk);
    (lambda * lc - (1.0 - lambda) * ls, pat)
}

pub const BLOCKS: [&str; 3] = ["encoder", "cond_head", "spk_head"];

pub fn block_mut<'a>(p: &'a mut NetworkParams<f64>, block: &str) -> &'a mut Mlp<f64> {
    match block {
        "encoder" => &mut p.encoder,
        "cond_head" => &mut p.cond_head,
        _ => &mut p.spk_head,
    }
}

/// The `k`-th parameter of a block in (weights, bias) per layer order.
pub fn param_mut(mlp: &mut Mlp<f64>, mut k: usize) -> &mut f64 {
    for layer in &mut mlp.layers {
        let nw = layer.weights.len();
        if k < nw {
            return layer.weights.iter_mut().nth(k).unwrap();
        }
        k -= nw;
        let nb = layer.bias.len();
        if k < nb {
            return &mut layer.bias[k];
        }
        k -= nb;
    }
    panic!("parameter index out of range")
}

/// A small random network with random (non-zero) biases, plus a batch.
pub struct Toy {
    pub params: NetworkParams<f64>,
    pub x: Array2<f64>,
    pub cond: Vec<usize>,
    pub spk: Vec<usize>,
    pub n_speakers: usize,
}

impl Toy {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let arch = Architecture {
            input_dim: r.random_range(2..=8),
            encoder_hidden: vec![r.random_range(2..=8)],
            embedding_dim: r.random_range(2..=8),
            head_hidden: vec![r.random_range(2..=8)],
            n_conditions: 2,
        };
        let n_speakers = r.random_range(2..=8);
        let mut params = NetworkParams::<f64>::init(&arch, n_speakers, seed.wrapping_mul(31).wrapping_add(7));
        for block in BLOCKS {
            for layer in &mut block_mut(&mut params, block).layers {
                layer.bias = Array1::from_shape_fn(layer.bias.len(), |_| r.random_range(-0.3..0.3));
            }
        }
        let batch = 5;
        let x = Array2::from_shape_fn((batch, arch.input_dim), |_| r.random_range(-1.5..1.5));
        let cond = (0..batch).map(|_| r.random_range(0..2)).collect();
        let spk = (0..batch).map(|_| r.random_range(0..n_speakers)).collect();
        Self {
            params,
            x,
            cond,
            spk,
            n_speakers,
        }
    }
}

pub struct FdOutcome {
    pub checked: usize,
    /// Parameters skipped because the stencil crossed a relu kink.
    pub skipped: usize,
    pub worst: f64,
}

/// Five-point central differences of `f` with respect to every parameter
/// of `block`, compared against `analytic` (same flattening order).
pub fn fd_check(
    params: &NetworkParams<f64>,
    block: &str,
    analytic: &[f64],
    f: &dyn Fn(&NetworkParams<f64>) -> (f64, Vec<bool>),
) -> FdOutcome {
    let h = 1e-5;
    let (_, base_pattern) = f(params);
    let mut out = FdOutcome {
        checked: 0,
        skipped: 0,
        worst: 0.0,
    };
    for (k, &a) in analytic.iter().enumerate() {
        let eval = |delta: f64| {
            let mut p = params.clone();
            *param_mut(block_mut(&mut p, block), k) += delta;
            f(&p)
        };
        let samples = [eval(2.0 * h), eval(h), eval(-h), eval(-2.0 * h)];
        if samples.iter().any(|(_, pat)| *pat != base_pattern) {
            out.skipped += 1;
            continue;
        }
        let n = (-samples[0].0 + 8.0 * samples[1].0 - 8.0 * samples[2].0 + samples[3].0) / (12.0 * h);
        out.worst = out.worst.max(rel_err(a, n, 1e-6));
        out.checked += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Spectral reference: direct DFT, filterbank and DCT built from the
// textbook definitions.

pub const SR: f64 = 16000.0;
pub const FFT: usize = 512;

pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| (PI * i as f64 / n as f64).sin().powi(2)).collect()
}

pub fn dft_power(weighted: &[f64]) -> Vec<f64> {
    (0..=FFT / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in weighted.iter().enumerate() {
                let w = -2.0 * PI * (k * n % FFT) as f64 / FFT as f64;
                re += x * w.cos();
                im += x * w.sin();
            }
            re * re + im * im
        })
        .collect()
}

fn mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

pub fn mfcc_reference(window: &[f64], n_mels: usize, n_mfcc: usize) -> Vec<f64> {
    let w = hann(window.len());
    let weighted: Vec<f64> = window.iter().zip(&w).map(|(a, b)| a * b).collect();
    let power = dft_power(&weighted);
    let top = mel(SR / 2.0);
    let edge = |i: usize| mel_inv(top * i as f64 / (n_mels + 1) as f64);
    let log_mel: Vec<f64> = (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
            let e: f64 = power
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let f = k as f64 * SR / FFT as f64;
                    let wgt = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    wgt * p
                })
                .sum();
            e.max(1e-10).ln()
        })
        .collect();
    let n = n_mels as f64;
    (0..n_mfcc)
        .map(|q| {
            let s: f64 = log_mel
                .iter()
                .enumerate()
                .map(|(i, &v)| v * (PI * q as f64 * (i as f64 + 0.5) / n).cos())
                .sum();
            s * if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

pub fn sine(n: usize, hz: f64, amp: f64, phase: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * hz * i as f64 / SR + phase).sin()).collect()
}

pub fn white_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// Student t tail by quadrature of the density.

pub fn t_density(x: f64, df: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * PI).ln();
    (c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

/// `P(|T| > |t|)` as `1 - 2 * integral_0^|t| f`, composite Simpson.
pub fn t_two_tailed_quadrature(t: f64, df: f64) -> f64 {
    let b = t.abs();
    let n = 20_000;
    let h = b / n as f64;
    let mut s = t_density(0.0, df) + t_density(b, df);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * t_density(i as f64 * h, df);
    }
    1.0 - 2.0 * s * h / 3.0
}
