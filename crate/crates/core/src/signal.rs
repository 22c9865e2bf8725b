//! Welch power spectral density with a Hamming window.
//!
//! Each channel is cut into `window_len` segments advanced by
//! `window_len - overlap_points`. Every windowed segment is zero padded to
//! `fft_len` before the transform. Periodograms `|X(f)|² / (rate · Σw²)`
//! are doubled strictly between DC and Nyquist, then averaged over
//! segments and restricted to `[f_lo_hz, f_hi_hz]`. With the defaults
//! (200-sample window, 8-sample overlap, 1000-point transform at 1 kHz)
//! the grid is 1, 2, …, 70 Hz.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::Grid;
use crate::Error;

/// One labelled multichannel trial. Samples are stored channel-major
/// (`channels × len`) as 32-bit floats, matching the dataset container.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecording {
    pub samples: Vec<f32>,
    pub channels: usize,
    pub len: usize,
    pub rate_hz: f64,
    pub label: usize,
    pub subject_id: String,
}

impl TrialRecording {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchConfig {
    pub window_len: usize,
    pub overlap_points: usize,
    pub fft_len: usize,
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
}

impl Default for WelchConfig {
    fn default() -> Self {
        WelchConfig {
            window_len: 200,
            overlap_points: 8,
            fft_len: 1000,
            f_lo_hz: 0.5,
            f_hi_hz: 70.0,
        }
    }
}

impl WelchConfig {
    pub fn hop(&self) -> usize {
        self.window_len - self.overlap_points
    }

    pub fn validate(&self, rate_hz: f64) -> Result<()> {
        if self.window_len == 0 || self.overlap_points >= self.window_len {
            return Err(invalid_arg!(
                "need 0 <= overlap ({}) < window ({})",
                self.overlap_points,
                self.window_len
            ));
        }
        if self.window_len > self.fft_len {
            return Err(invalid_arg!(
                "window ({}) longer than transform ({})",
                self.window_len,
                self.fft_len
            ));
        }
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(invalid_arg!("sampling rate must be positive, got {rate_hz}"));
        }
        if !(self.f_lo_hz < self.f_hi_hz && self.f_hi_hz <= rate_hz / 2.0) {
            return Err(invalid_arg!(
                "analysis band [{}, {}] Hz invalid for rate {rate_hz} Hz",
                self.f_lo_hz,
                self.f_hi_hz
            ));
        }
        Ok(())
    }

    /// Indices and frequencies of the transform bins inside the band.
    pub fn bins(&self, rate_hz: f64) -> Vec<(usize, f64)> {
        let df = rate_hz / self.fft_len as f64;
        (0..=self.fft_len / 2)
            .map(|k| (k, k as f64 * df))
            .filter(|&(_, f)| f >= self.f_lo_hz && f <= self.f_hi_hz)
            .collect()
    }
}

/// Per-channel PSD on a fixed grid: `values` is `channels × bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdFeatures {
    pub values: Grid,
    pub freqs_hz: Vec<f64>,
}

impl PsdFeatures {
    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }
}

/// Symmetric Hamming window `0.54 − 0.46·cos(2πk/(n−1))`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(invalid_arg!("window length must be positive")),
        1 => Ok(vec![1.0]),
        _ => {
            let denom = (n - 1) as f64;
            Ok((0..n)
                .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / denom).cos())
                .collect())
        }
    }
}

/// Windows of `cfg.window_len` samples starting every `cfg.hop()` samples;
/// the trailing remainder that does not fill a window is dropped.
pub fn segment_signal<'a, T>(channel: &'a [T], cfg: &WelchConfig) -> Result<Vec<&'a [T]>> {
    let (n, len) = (channel.len(), cfg.window_len);
    if len == 0 || cfg.overlap_points >= len {
        return Err(invalid_arg!("invalid window/overlap {len}/{}", cfg.overlap_points));
    }
    if n < len {
        return Err(invalid_arg!("signal of {n} samples shorter than window {len}"));
    }
    let hop = cfg.hop();
    let count = (n - len) / hop + 1;
    Ok((0..count).map(|j| &channel[j * hop..j * hop + len]).collect())
}

pub fn welch_psd(trial: &TrialRecording, cfg: &WelchConfig) -> Result<PsdFeatures> {
    cfg.validate(trial.rate_hz)?;
    if trial.channels == 0 || trial.samples.len() != trial.channels * trial.len {
        return Err(Error::InvalidData(format!(
            "trial has {} samples for {} channels × {}",
            trial.samples.len(),
            trial.channels,
            trial.len
        )));
    }
    if let Some(i) = trial.samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite sample at channel {}, index {}",
            i / trial.len,
            i % trial.len
        )));
    }
    let window = hamming_window(cfg.window_len)?;
    let energy: f64 = window.iter().map(|w| w * w).sum();
    let bins = cfg.bins(trial.rate_hz);
    let nyquist_bin = cfg.fft_len.is_multiple_of(2).then_some(cfg.fft_len / 2);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Grid::zeros(&[trial.channels, bins.len()]);

    for c in 0..trial.channels {
        let segments = segment_signal(trial.channel(c), cfg)?;
        let mut acc = vec![0.0; bins.len()];
        for seg in &segments {
            for (slot, (&x, &w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
                *slot = Complex::new(f64::from(x) * w, 0.0);
            }
            buf[cfg.window_len..].fill(Complex::new(0.0, 0.0));
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (a, &(k, _)) in acc.iter_mut().zip(&bins) {
                let mut p = buf[k].norm_sqr();
                if k != 0 && Some(k) != nyquist_bin {
                    p *= 2.0;
                }
                *a += p;
            }
        }
        let norm = 1.0 / (trial.rate_hz * energy * segments.len() as f64);
        for (dst, a) in values.row_mut(c).iter_mut().zip(acc) {
            *dst = a * norm;
        }
    }
    Ok(PsdFeatures {
        values,
        freqs_hz: bins.iter().map(|&(_, f)| f).collect(),
    })
}
