//! Slaney-style mel filterbank and log-mel spectrogram extraction.

use serde::{Deserialize, Serialize};

use super::stft::Stft;
use super::AudioClip;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Magnitudes are clamped to this floor before the natural log.
pub const MEL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            n_fft: 1024,
            win_length: 1024,
            hop_length: 256,
            n_mels: 80,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl MelConfig {
    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop_length == 0 || self.n_mels == 0 {
            return Err(Error::Config(
                "sample_rate, hop_length and n_mels must be positive".into(),
            ));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            return Err(Error::Config(format!(
                "win_length {} must be in 1..=n_fft ({})",
                self.win_length, self.n_fft
            )));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max()) {
            return Err(Error::Config("mel band must satisfy 0 <= f_min < f_max".into()));
        }
        Ok(())
    }

    pub fn stft(&self) -> Stft {
        Stft::new(self.n_fft, self.win_length, self.hop_length)
    }

    pub fn frame_seconds(&self) -> f64 {
        self.hop_length as f64 / self.sample_rate as f64
    }
}

/// `t × n_mels` natural-log mel magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub hop_length: usize,
    pub n_fft: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_HZ / F_SP + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let min_log_mel = MIN_LOG_HZ / F_SP;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (log_step() * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Band edges in Hz: `n_mels + 2` points equally spaced on the mel scale.
pub fn mel_band_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max());
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// `n_mels × (n_fft/2 + 1)` triangular filters with area (Slaney)
/// normalization.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let edges = mel_band_edges(cfg);
    let n_bins = cfg.n_fft / 2 + 1;
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let enorm = 2.0 / (hi - lo);
            bin_hz
                .iter()
                .map(|&f| {
                    let lower = (f - lo) / (center - lo);
                    let upper = (hi - f) / (hi - center);
                    lower.min(upper).max(0.0) * enorm
                })
                .collect()
        })
        .collect()
}

/// Log-mel spectrogram of a clip: centered STFT with a Hann window,
/// magnitude, mel projection, `ln(max(x, 1e-5))`. Produces
/// `⌊len/hop⌋ + 1` frames.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if clip.samples.is_empty() {
        return Err(Error::InputTooShort("clip has no samples".into()));
    }
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip sample rate {} differs from mel config {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let stft = cfg.stft();
    let spec = stft.forward(&clip.samples);
    let fb = mel_filterbank(cfg);
    Ok(MelSpectrogram {
        frames: magnitudes_to_log_mel(&spec_magnitudes(&spec), &fb)?,
        hop_length: cfg.hop_length,
        n_fft: cfg.n_fft,
    })
}

pub(crate) fn spec_magnitudes(spec: &[Vec<rustfft::num_complex::Complex64>]) -> Vec<Vec<f64>> {
    spec.iter()
        .map(|frame| frame.iter().map(|c| c.norm()).collect())
        .collect()
}

pub(crate) fn magnitudes_to_log_mel(mags: &[Vec<f64>], fb: &[Vec<f64>]) -> Result<Tensor> {
    let n_mels = fb.len();
    let mut data = Vec::with_capacity(mags.len() * n_mels);
    for frame in mags {
        for filter in fb {
            let e: f64 = filter.iter().zip(frame).map(|(w, m)| w * m).sum();
            data.push(e.max(MEL_FLOOR).ln());
        }
    }
    Tensor::matrix(mags.len(), n_mels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 50.0, 440.0, 999.0, 1000.0, 4000.0, 11025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
    }

    #[test]
    fn filterbank_rows_are_positive_and_respond_to_flat_spectrum() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg);
        assert_eq!(fb.len(), 80);
        for row in &fb {
            assert!(row.iter().sum::<f64>() > 0.0);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
        let flat = vec![vec![1.0; cfg.n_fft / 2 + 1]];
        let energies = magnitudes_to_log_mel(&flat, &fb).unwrap();
        assert!(energies.data().iter().all(|&e| e > MEL_FLOOR.ln()));
    }

    #[test]
    fn rejects_empty_clip() {
        let clip = AudioClip::new(vec![], 22050).unwrap();
        assert!(matches!(
            mel_spectrogram(&clip, &MelConfig::default()),
            Err(Error::InputTooShort(_))
        ));
    }
}
