//! Phase reconstruction from a log-mel spectrogram.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;

use super::mel::{mel_filterbank, MelConfig, MelSpectrogram};
use super::AudioClip;
use crate::error::{Error, Result};

pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 60;

/// Linear magnitudes from mel magnitudes through the filterbank
/// pseudo-inverse, clamped at zero.
fn mel_to_linear(mel: &MelSpectrogram, cfg: &MelConfig) -> Result<Vec<Vec<f64>>> {
    let fb = mel_filterbank(cfg);
    let n_mels = fb.len();
    let n_bins = fb[0].len();
    if mel.n_mels() != n_mels {
        return Err(Error::shape("griffin_lim", n_mels, mel.n_mels()));
    }
    let basis = DMatrix::from_fn(n_mels, n_bins, |r, c| fb[r][c]);
    let pinv = basis
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Config(format!("filterbank pseudo-inverse failed: {e}")))?;
    let frames = mel.n_frames();
    let mel_mag = DMatrix::from_fn(n_mels, frames, |m, t| mel.frames.get2(t, m).exp());
    let linear = pinv * mel_mag;
    Ok((0..frames)
        .map(|t| (0..n_bins).map(|k| linear[(k, t)].max(0.0)).collect())
        .collect())
}

/// Griffin–Lim reconstruction starting from zero phase. The output has
/// `(t − 1)·hop` samples; the result is fully deterministic.
pub fn griffin_lim(mel: &MelSpectrogram, n_iters: usize, cfg: &MelConfig) -> Result<AudioClip> {
    cfg.validate()?;
    if mel.n_frames() == 0 {
        return Err(Error::Empty("mel spectrogram has no frames".into()));
    }
    let magnitude = mel_to_linear(mel, cfg)?;
    let stft = cfg.stft();
    let length = (mel.n_frames() - 1) * cfg.hop_length;
    let mut spec: Vec<Vec<Complex64>> = magnitude
        .iter()
        .map(|frame| frame.iter().map(|&m| Complex64::new(m, 0.0)).collect())
        .collect();
    let mut signal = stft.inverse(&spec, length);
    for _ in 0..n_iters {
        let rebuilt = stft.forward(&signal);
        for ((target, frame), est) in magnitude.iter().zip(spec.iter_mut()).zip(&rebuilt) {
            for ((&m, slot), c) in target.iter().zip(frame.iter_mut()).zip(est) {
                let norm = c.norm();
                *slot = if norm > 1e-16 {
                    c * (m / norm)
                } else {
                    Complex64::new(m, 0.0)
                };
            }
        }
        signal = stft.inverse(&spec, length);
    }
    AudioClip::new(signal, cfg.sample_rate)
}
