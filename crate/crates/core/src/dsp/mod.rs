//! Signal-domain preprocessing: log-mel features, pitch tracking and
//! Griffin–Lim reconstruction.

mod griffin_lim;
mod mel;
mod pitch;
mod stft;
pub mod wav;

pub use griffin_lim::{griffin_lim, DEFAULT_GRIFFIN_LIM_ITERS};
pub use mel::{
    hz_to_mel, mel_band_edges, mel_filterbank, mel_spectrogram, mel_to_hz, MelConfig, MelSpectrogram, MEL_FLOOR,
};
pub use pitch::{path_cost, track_pitch, viterbi, Candidate, FramePitch, PitchConfig, TransitionCosts};
pub use stft::{hann_periodic, hann_symmetric, Stft};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 22050;

/// Mono audio with a sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// A sine tone of `amplitude` at `hz`, `seconds` long.
    pub fn sine(hz: f64, seconds: f64, amplitude: f64, sample_rate: u32) -> Self {
        let n = (seconds * sample_rate as f64).round() as usize;
        let step = 2.0 * std::f64::consts::PI * hz / sample_rate as f64;
        Self {
            samples: (0..n).map(|i| amplitude * (step * i as f64).sin()).collect(),
            sample_rate,
        }
    }
}
