//! Centered short-time Fourier transform and its overlap-add inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Symmetric Hann window of length `n` (used for pitch analysis frames).
pub fn hann_symmetric(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    /// `win_length ≤ n_fft`; shorter windows are zero-padded symmetrically.
    pub fn new(n_fft: usize, win_length: usize, hop: usize) -> Self {
        let mut window = vec![0.0; n_fft];
        let offset = (n_fft - win_length) / 2;
        window[offset..offset + win_length].copy_from_slice(&hann_periodic(win_length));
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frames produced for a signal of `len` samples with center padding.
    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Centered STFT with `n_fft/2` zeros of padding on each side; returns
    /// `frames × bins` complex coefficients.
    pub fn forward(&self, samples: &[f64]) -> Vec<Vec<Complex64>> {
        let pad = self.n_fft / 2;
        let frames = self.frame_count(samples.len());
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut out = Vec::with_capacity(frames);
        for f in 0..frames {
            let start = (f * self.hop) as isize - pad as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < samples.len() {
                    samples[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..self.n_bins()].to_vec());
        }
        out
    }

    /// Weighted overlap-add inverse, trimmed to `length` samples of the
    /// original (unpadded) signal.
    pub fn inverse(&self, spec: &[Vec<Complex64>], length: usize) -> Vec<f64> {
        let pad = self.n_fft / 2;
        let total = self.n_fft + self.hop * spec.len().saturating_sub(1);
        let mut signal = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let bins = self.n_bins();
        for (f, frame) in spec.iter().enumerate() {
            buf[..bins].copy_from_slice(frame);
            for k in bins..self.n_fft {
                buf[k] = frame[self.n_fft - k].conj();
            }
            // Imaginary parts of the DC and Nyquist bins do not survive a
            // real signal.
            buf[0].im = 0.0;
            if self.n_fft.is_multiple_of(2) {
                buf[self.n_fft / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                signal[start + i] += buf[i].re / self.n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        let tiny = f64::MIN_POSITIVE.sqrt();
        (0..length)
            .map(|i| {
                let j = i + pad;
                if j < total && norm[j] > tiny {
                    signal[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}
