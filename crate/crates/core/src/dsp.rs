//! Low-level descriptor extraction.
//!
//! One second of 16 kHz audio is cut into 99 windows of 20 ms with a 10 ms
//! hop. Each window yields 19 descriptors (13 MFCCs, RMS, zero-crossing
//! rate, spectral centroid, roll-off, flatness and pitch); the per-second
//! vector holds the mean and population standard deviation of each one, 38
//! values in total.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Descriptors per analysis window.
pub const N_DESCRIPTORS: usize = 19;

/// Names in output order; the 38-dim vector interleaves `(mean, std)` per name.
pub const DESCRIPTOR_NAMES: [&str; N_DESCRIPTORS] = [
    "mfcc0", "mfcc1", "mfcc2", "mfcc3", "mfcc4", "mfcc5", "mfcc6", "mfcc7", "mfcc8", "mfcc9", "mfcc10",
    "mfcc11", "mfcc12", "rms", "zcr", "centroid", "rolloff", "flatness", "pitch",
];

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("expected {expected} samples, got {found}")]
    WrongLength { expected: usize, found: usize },
    #[error("need at least 2 analysis windows, got {0}")]
    TooFewWindows(usize),
    #[error("invalid analysis config: {0}")]
    Config(String),
}

/// Analysis parameters. Defaults follow common speech-toolkit choices:
/// 512-point FFT, 40 HTK-scale triangular mel bands (peak-normalized, no
/// area normalization), natural log with a `1e-10` floor, orthonormal DCT-II.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub sample_rate: usize,
    pub window: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub rolloff_fraction: f64,
    pub pitch_min_hz: f64,
    pub pitch_max_hz: f64,
    /// Minimum normalized autocorrelation peak for a window to count as voiced.
    pub voicing_threshold: f64,
    pub log_floor: f64,
    /// When false (default) unvoiced windows contribute pitch 0 to the
    /// per-second mean and std.
    pub pitch_voiced_only: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 320,
            hop: 160,
            fft_size: 512,
            n_mels: 40,
            n_mfcc: 13,
            rolloff_fraction: 0.85,
            pitch_min_hz: 50.0,
            pitch_max_hz: 500.0,
            voicing_threshold: 0.3,
            log_floor: 1e-10,
            pitch_voiced_only: false,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let fail = |m: &str| Err(DspError::Config(m.to_string()));
        if self.window == 0 || self.hop == 0 {
            return fail("window and hop must be positive");
        }
        if self.window > self.fft_size {
            return fail("window must not exceed fft_size");
        }
        if self.hop > self.window {
            return fail("hop must not exceed window");
        }
        if self.n_mfcc > self.n_mels {
            return fail("n_mfcc must not exceed n_mels");
        }
        if self.n_mfcc != 13 {
            return fail("n_mfcc is fixed at 13 for the 38-dim layout");
        }
        if !(0.0..=1.0).contains(&self.rolloff_fraction) {
            return fail("rolloff_fraction must lie in [0, 1]");
        }
        if !(0.0 < self.pitch_min_hz && self.pitch_min_hz < self.pitch_max_hz) {
            return fail("pitch range must satisfy 0 < min < max");
        }
        Ok(())
    }

    /// Samples in one frame (one second).
    pub fn frame_len(&self) -> usize {
        self.sample_rate
    }

    pub fn windows_per_frame(&self) -> usize {
        (self.frame_len() - self.window) / self.hop + 1
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.fft_size as f64
    }
}

/// Descriptors of one analysis window.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorFrame<T> {
    pub mfcc: Vec<T>,
    pub rms: T,
    pub zcr: T,
    pub centroid: T,
    pub rolloff: T,
    pub flatness: T,
    pub pitch: T,
}

impl<T: Real> DescriptorFrame<T> {
    /// Values in [`DESCRIPTOR_NAMES`] order.
    pub fn values(&self) -> Vec<T> {
        let mut v = self.mfcc.clone();
        v.extend([self.rms, self.zcr, self.centroid, self.rolloff, self.flatness, self.pitch]);
        v
    }
}

/// Splits one second of audio into analysis windows (unweighted).
pub fn window_frames<'a, T>(audio: &'a [T], cfg: &AnalysisConfig) -> Result<Vec<&'a [T]>, DspError> {
    if audio.len() != cfg.frame_len() {
        return Err(DspError::WrongLength {
            expected: cfg.frame_len(),
            found: audio.len(),
        });
    }
    Ok((0..cfg.windows_per_frame())
        .map(|i| &audio[i * cfg.hop..i * cfg.hop + cfg.window])
        .collect())
}

pub fn rms<T: Real>(window: &[T]) -> T {
    let ss: T = window.iter().map(|&x| x * x).sum();
    (ss / T::from_count(window.len())).sqrt()
}

/// Fraction of adjacent sample pairs whose sign differs. A sample is
/// positive iff `x > 0`; exact zeros fall on the non-positive side.
pub fn zcr<T: Real>(window: &[T]) -> T {
    if window.len() < 2 {
        return T::zero();
    }
    let flips = window
        .windows(2)
        .filter(|p| (p[0] > T::zero()) != (p[1] > T::zero()))
        .count();
    T::from_count(flips) / T::from_count(window.len() - 1)
}

/// Magnitude-weighted mean frequency. Zero for an all-zero spectrum.
pub fn spectral_centroid<T: Real>(magnitude: &[T], bin_hz: T) -> T {
    let total: T = magnitude.iter().copied().sum();
    if total <= T::zero() {
        return T::zero();
    }
    let weighted: T = magnitude
        .iter()
        .enumerate()
        .map(|(k, &m)| T::from_count(k) * bin_hz * m)
        .sum();
    weighted / total
}

/// Lowest bin frequency whose cumulative magnitude reaches `fraction` of
/// the total. Zero for an all-zero spectrum.
pub fn spectral_rolloff<T: Real>(magnitude: &[T], bin_hz: T, fraction: T) -> T {
    let total: T = magnitude.iter().copied().sum();
    if total <= T::zero() {
        return T::zero();
    }
    let target = fraction * total;
    let mut acc = T::zero();
    for (k, &m) in magnitude.iter().enumerate() {
        acc = acc + m;
        if acc >= target {
            return T::from_count(k) * bin_hz;
        }
    }
    T::from_count(magnitude.len() - 1) * bin_hz
}

/// Geometric over arithmetic mean of the power spectrum, with each bin
/// floored at `floor`. An all-zero spectrum is maximally flat (1).
pub fn spectral_flatness<T: Real>(power: &[T], floor: T) -> T {
    if power.iter().all(|&p| p == T::zero()) {
        return T::one();
    }
    let n = T::from_count(power.len());
    let log_mean = power.iter().map(|&p| p.max(floor).ln()).sum::<T>() / n;
    let mean = power.iter().map(|&p| p.max(floor)).sum::<T>() / n;
    (log_mean.exp() / mean).min(T::one())
}

/// Autocorrelation pitch estimate over the raw window.
///
/// The biased autocorrelation `r(lag) = sum x[n] x[n + lag] / sum x[n]^2` is
/// searched over lags covering `[pitch_min_hz, pitch_max_hz]` (capped at the
/// window length); the best lag is voiced when `r >= voicing_threshold`.
/// Returns 0 for unvoiced or silent windows.
pub fn pitch<T: Real>(window: &[T], cfg: &AnalysisConfig) -> T {
    let energy: T = window.iter().map(|&x| x * x).sum();
    if energy <= T::zero() || window.len() < 2 {
        return T::zero();
    }
    let fs = cfg.sample_rate as f64;
    let min_lag = (fs / cfg.pitch_max_hz).ceil() as usize;
    let max_lag = ((fs / cfg.pitch_min_hz).floor() as usize).min(window.len() - 1);
    if min_lag > max_lag {
        return T::zero();
    }
    let mut best = (min_lag, T::neg_infinity());
    for lag in min_lag..=max_lag {
        let r: T = window[..window.len() - lag]
            .iter()
            .zip(&window[lag..])
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            / energy;
        if r > best.1 {
            best = (lag, r);
        }
    }
    if best.1 >= T::lit(cfg.voicing_threshold) {
        T::lit(fs) / T::from_count(best.0)
    } else {
        T::zero()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels` rows of `n_bins` weights.
pub fn mel_filterbank(cfg: &AnalysisConfig) -> Vec<Vec<f64>> {
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..cfg.n_bins())
                .map(|k| {
                    let f = k as f64 * cfg.bin_hz();
                    let rising = (f - lo) / (mid - lo);
                    let falling = (hi - f) / (hi - mid);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II basis, `n_out` rows of `n_in` coefficients.
pub fn dct_ortho_basis(n_in: usize, n_out: usize) -> Vec<Vec<f64>> {
    let n = n_in as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..n_in)
                .map(|i| scale * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .collect()
        })
        .collect()
}

/// Holds the FFT plan, Hann window, mel filterbank and DCT basis for one
/// [`AnalysisConfig`].
pub struct Analyzer<T: Real> {
    cfg: AnalysisConfig,
    hann: Vec<T>,
    fft: Arc<dyn Fft<T>>,
    mel: Vec<Vec<T>>,
    dct: Vec<Vec<T>>,
}

impl<T: Real> std::fmt::Debug for Analyzer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Analyzer").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl<T: Real> Analyzer<T> {
    pub fn new(cfg: AnalysisConfig) -> Result<Self, DspError> {
        cfg.validate()?;
        // periodic Hann
        let hann = (0..cfg.window)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / cfg.window as f64;
                T::lit(0.5 - 0.5 * phase.cos())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let to_t = |m: Vec<Vec<f64>>| -> Vec<Vec<T>> {
            m.into_iter().map(|r| r.into_iter().map(T::lit).collect()).collect()
        };
        let mel = to_t(mel_filterbank(&cfg));
        let dct = to_t(dct_ortho_basis(cfg.n_mels, cfg.n_mfcc));
        Ok(Self {
            cfg,
            hann,
            fft,
            mel,
            dct,
        })
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.cfg
    }

    pub fn hann_weighted(&self, window: &[T]) -> Vec<T> {
        window.iter().zip(&self.hann).map(|(&x, &w)| x * w).collect()
    }

    /// One-sided magnitude spectrum of an already weighted window, zero
    /// padded to `fft_size`.
    pub fn magnitude(&self, weighted: &[T]) -> Vec<T> {
        let mut buf: Vec<Complex<T>> = vec![Complex::new(T::zero(), T::zero()); self.cfg.fft_size];
        for (b, &x) in buf.iter_mut().zip(weighted) {
            b.re = x;
        }
        self.fft.process(&mut buf);
        buf[..self.cfg.n_bins()].iter().map(|c| c.norm()).collect()
    }

    /// `(centroid, rolloff, flatness)` of a weighted window.
    pub fn spectrum_descriptors(&self, weighted: &[T]) -> (T, T, T) {
        let mag = self.magnitude(weighted);
        self.descriptors_from_magnitude(&mag)
    }

    fn descriptors_from_magnitude(&self, mag: &[T]) -> (T, T, T) {
        let bin_hz = T::lit(self.cfg.bin_hz());
        let power: Vec<T> = mag.iter().map(|&m| m * m).collect();
        (
            spectral_centroid(mag, bin_hz),
            spectral_rolloff(mag, bin_hz, T::lit(self.cfg.rolloff_fraction)),
            spectral_flatness(&power, T::lit(self.cfg.log_floor)),
        )
    }

    /// MFCCs of a weighted window.
    pub fn mfcc(&self, weighted: &[T]) -> Vec<T> {
        let mag = self.magnitude(weighted);
        self.mfcc_from_magnitude(&mag)
    }

    fn mfcc_from_magnitude(&self, mag: &[T]) -> Vec<T> {
        let floor = T::lit(self.cfg.log_floor);
        let log_mel: Vec<T> = self
            .mel
            .iter()
            .map(|filt| {
                let e: T = filt.iter().zip(mag).map(|(&w, &m)| w * m * m).sum();
                e.max(floor).ln()
            })
            .collect();
        self.dct
            .iter()
            .map(|basis| basis.iter().zip(&log_mel).map(|(&b, &l)| b * l).sum())
            .collect()
    }

    /// All 19 descriptors of one raw window.
    pub fn describe(&self, window: &[T]) -> DescriptorFrame<T> {
        let weighted = self.hann_weighted(window);
        let mag = self.magnitude(&weighted);
        let (centroid, rolloff, flatness) = self.descriptors_from_magnitude(&mag);
        DescriptorFrame {
            mfcc: self.mfcc_from_magnitude(&mag),
            rms: rms(window),
            zcr: zcr(window),
            centroid,
            rolloff,
            flatness,
            pitch: pitch(window, &self.cfg),
        }
    }

    /// One second of audio to the 38-dim descriptor vector.
    pub fn extract_frame(&self, audio: &[T]) -> Result<Vec<T>, DspError> {
        let frames: Vec<DescriptorFrame<T>> = window_frames(audio, &self.cfg)?
            .into_iter()
            .map(|w| self.describe(w))
            .collect();
        aggregate_frame(&frames, self.cfg.pitch_voiced_only)
    }
}

fn mean_std<T: Real>(xs: &[T]) -> (T, T) {
    match xs.first() {
        None => return (T::zero(), T::zero()),
        // constant columns would otherwise pick up summation rounding
        Some(&x0) if xs.iter().all(|&x| x == x0) => return (x0, T::zero()),
        _ => {}
    }
    let n = T::from_count(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// Mean and population std of each descriptor, interleaved
/// `[mfcc0_mean, mfcc0_std, mfcc1_mean, ..., pitch_mean, pitch_std]`.
pub fn aggregate_frame<T: Real>(frames: &[DescriptorFrame<T>], pitch_voiced_only: bool) -> Result<Vec<T>, DspError> {
    if frames.len() < 2 {
        return Err(DspError::TooFewWindows(frames.len()));
    }
    let rows: Vec<Vec<T>> = frames.iter().map(DescriptorFrame::values).collect();
    let mut out = Vec::with_capacity(2 * N_DESCRIPTORS);
    for d in 0..N_DESCRIPTORS {
        let mut column: Vec<T> = rows.iter().map(|r| r[d]).collect();
        if pitch_voiced_only && d == N_DESCRIPTORS - 1 {
            column.retain(|&p| p > T::zero());
        }
        let (m, s) = mean_std(&column);
        out.push(m);
        out.push(s);
    }
    Ok(out)
}
