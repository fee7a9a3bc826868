//! Text-to-mel synthesis with pitch editing, plus latency benchmarking.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dsp::{griffin_lim, AudioClip, MelSpectrogram};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, InferControls, PitchEdit, Speaker, TokenSequence};
use crate::numerics::Tensor;
use crate::prosody::PitchStats;

/// Lowest pitch a transform may produce.
pub const MIN_PITCH_HZ: f64 = 1.0;

/// An edit of the predicted pitch contour. Everything except `ShiftStd`
/// operates in Hz; entries that are exactly 0 (the no-pitch sentinel) are
/// never changed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PitchTransform {
    ShiftHz(f64),
    /// Shift in standardized units.
    ShiftStd(f64),
    /// `v ↦ m + c·(v − m)` with `m` the utterance's voiced mean in Hz.
    Scale(f64),
    Invert,
    Flatten,
    /// Per-symbol Hz values, keyed by symbol index.
    SetValues(BTreeMap<usize, f64>),
}

fn clamp_hz(hz: f64) -> f64 {
    if hz < MIN_PITCH_HZ {
        log::warn!("pitch transform produced {hz:.3} Hz; clamped to {MIN_PITCH_HZ} Hz");
        MIN_PITCH_HZ
    } else {
        hz
    }
}

/// A voiced value that lands exactly on the corpus mean would read back as
/// the sentinel; keep it voiced with the smallest positive offset, which
/// still de-standardizes to the mean.
fn keep_voiced(z: f64) -> f64 {
    if z == 0.0 {
        f64::MIN_POSITIVE
    } else {
        z
    }
}

/// Applies `transform` to a standardized `n × p` pitch matrix.
pub fn apply_transform(pitch: &Tensor, transform: &PitchTransform, stats: &PitchStats) -> Result<Tensor> {
    if pitch.shape().len() != 2 {
        return Err(Error::shape("apply_transform", "n × p", format!("{:?}", pitch.shape())));
    }
    let cols = pitch.cols();
    let voiced_hz = || {
        let hz: Vec<f64> = pitch
            .data()
            .iter()
            .filter(|&&z| z != 0.0)
            .map(|&z| stats.de_standardize_value(z))
            .collect();
        (!hz.is_empty()).then(|| hz.iter().sum::<f64>() / hz.len() as f64)
    };
    let in_hz = |f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
        pitch
            .data()
            .iter()
            .enumerate()
            .map(|(k, &z)| {
                if z == 0.0 {
                    0.0
                } else {
                    keep_voiced(stats.standardize_value(clamp_hz(f(k / cols, stats.de_standardize_value(z)))))
                }
            })
            .collect()
    };
    let data = match transform {
        PitchTransform::ShiftHz(delta) => in_hz(&|_, hz| hz + delta),
        PitchTransform::ShiftStd(delta) => pitch
            .data()
            .iter()
            .map(|&z| if z == 0.0 { 0.0 } else { keep_voiced(z + delta) })
            .collect(),
        PitchTransform::Scale(c) => scale(pitch, *c, voiced_hz(), &in_hz),
        PitchTransform::Invert => scale(pitch, -1.0, voiced_hz(), &in_hz),
        PitchTransform::Flatten => scale(pitch, 0.0, voiced_hz(), &in_hz),
        PitchTransform::SetValues(values) => {
            for (&i, &hz) in values {
                if i >= pitch.rows() {
                    return Err(Error::OutOfRange(format!(
                        "pitch override for symbol {i}, but the utterance has {} symbols",
                        pitch.rows()
                    )));
                }
                if !hz.is_finite() || hz <= 0.0 {
                    return Err(Error::OutOfRange(format!("pitch override {hz} Hz for symbol {i}")));
                }
            }
            in_hz(&|row, hz| values.get(&row).copied().unwrap_or(hz))
        }
    };
    Tensor::matrix(pitch.rows(), cols, data)
}

/// Applies a per-entry Hz map `(row, hz) ↦ hz'` to the voiced entries.
type HzMap<'a> = &'a dyn Fn(&dyn Fn(usize, f64) -> f64) -> Vec<f64>;

fn scale(pitch: &Tensor, c: f64, mean: Option<f64>, in_hz: HzMap) -> Vec<f64> {
    match mean {
        Some(m) => in_hz(&|_, hz| m + c * (hz - m)),
        None => pitch.data().to_vec(),
    }
}

/// Applies `transforms` left to right.
pub fn apply_transforms(pitch: &Tensor, transforms: &[PitchTransform], stats: &PitchStats) -> Result<Tensor> {
    transforms
        .iter()
        .try_fold(pitch.clone(), |p, t| apply_transform(&p, t, stats))
}

/// One Hz value per symbol: the mean over the symbol's voiced pitch
/// entries, `None` when all are the sentinel.
pub fn pitch_hz_per_symbol(pitch: &Tensor, stats: &PitchStats) -> Vec<Option<f64>> {
    (0..pitch.rows())
        .map(|r| {
            let voiced: Vec<f64> = pitch.row(r).iter().filter(|&&z| z != 0.0).copied().collect();
            (!voiced.is_empty())
                .then(|| voiced.iter().map(|&z| stats.de_standardize_value(z)).sum::<f64>() / voiced.len() as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub symbols: Vec<char>,
    pub durations: Vec<usize>,
    /// Model prediction before any transform.
    pub predicted_pitch_hz: Vec<Option<f64>>,
    /// Pitch used for synthesis.
    pub pitch_hz: Vec<Option<f64>>,
    /// Standardized pitch used for synthesis, `n × p`.
    pub pitch: Tensor,
    pub mel: MelSpectrogram,
    pub audio: Option<AudioClip>,
}

/// Normalizes `text`, runs the model with the pitch edits applied, and
/// optionally vocodes with `vocoder_iters` Griffin-Lim iterations.
pub fn synthesize(
    checkpoint: &Checkpoint,
    text: &str,
    speaker: Speaker,
    transforms: &[PitchTransform],
    vocoder_iters: Option<usize>,
) -> Result<Synthesis> {
    synthesize_from(checkpoint, text, speaker, None, transforms, vocoder_iters)
}

/// Like [`synthesize`], but `base_pitch` (standardized, `n × p`) replaces
/// the predicted contour before the transforms when given.
pub fn synthesize_from(
    checkpoint: &Checkpoint,
    text: &str,
    speaker: Speaker,
    base_pitch: Option<&Tensor>,
    transforms: &[PitchTransform],
    vocoder_iters: Option<usize>,
) -> Result<Synthesis> {
    let (symbols, ids) = checkpoint.vocabulary.encode(text)?;
    let seq = TokenSequence::new(ids).with_speaker(speaker);
    let stats = checkpoint.pitch_stats;
    let edit = |predicted: &Tensor| match base_pitch {
        Some(base) if base.shape() != predicted.shape() => Err(Error::shape(
            "synthesize_from",
            format!("{:?}", predicted.shape()),
            format!("{:?}", base.shape()),
        )),
        Some(base) => apply_transforms(base, transforms, &stats),
        None => apply_transforms(predicted, transforms, &stats),
    };
    let controls = InferControls {
        pitch: (base_pitch.is_some() || !transforms.is_empty()).then_some(&edit as PitchEdit),
        durations: None,
    };
    let out = checkpoint.model.forward_infer(&seq, &controls)?;
    let mel = MelSpectrogram {
        frames: out.mel,
        hop_length: checkpoint.audio.hop_length,
        n_fft: checkpoint.audio.n_fft,
    };
    let audio = match vocoder_iters {
        Some(iters) => Some(griffin_lim(&mel, iters, &checkpoint.audio)?),
        None => None,
    };
    Ok(Synthesis {
        symbols,
        durations: out.durations,
        predicted_pitch_hz: pitch_hz_per_symbol(&out.predicted_pitch, &stats),
        pitch_hz: pitch_hz_per_symbol(&out.pitch, &stats),
        pitch: out.pitch,
        mel,
        audio,
    })
}

/// Element-wise `|a − b|` of two equally shaped mel spectrograms.
pub fn mel_difference(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mel_difference",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    /// Per batch.
    pub mean_latency_s: f64,
    pub std_latency_s: f64,
    pub rtf: f64,
    pub batch_size: usize,
    pub utterances: usize,
    pub repeats: usize,
    pub audio_seconds: f64,
    pub wall_seconds: f64,
}

/// Seconds of audio per second of wall-clock time.
pub fn real_time_factor(audio_seconds: f64, wall_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) || !(wall_seconds > 0.0) {
        return Err(Error::OutOfRange(format!(
            "real-time factor needs positive durations, got {audio_seconds} s audio in {wall_seconds} s"
        )));
    }
    Ok(audio_seconds / wall_seconds)
}

/// Summarizes per-batch `(audio seconds, wall seconds)` measurements.
pub fn summarize_timings(
    timings: &[(f64, f64)],
    batch_size: usize,
    utterances: usize,
    repeats: usize,
) -> Result<BenchmarkReport> {
    if timings.is_empty() {
        return Err(Error::Empty("no timings to summarize".into()));
    }
    let n = timings.len() as f64;
    let audio_seconds: f64 = timings.iter().map(|t| t.0).sum();
    let wall_seconds: f64 = timings.iter().map(|t| t.1).sum();
    let mean = wall_seconds / n;
    let var = timings.iter().map(|t| (t.1 - mean).powi(2)).sum::<f64>() / n;
    Ok(BenchmarkReport {
        mean_latency_s: mean,
        std_latency_s: var.sqrt(),
        rtf: real_time_factor(audio_seconds, wall_seconds)?,
        batch_size,
        utterances,
        repeats,
        audio_seconds,
        wall_seconds,
    })
}

/// Times mel generation for `texts` in batches of `batch_size`, `repeats`
/// passes after one untimed warmup pass. Utterances in a batch run
/// sequentially on the calling thread; audio seconds come from the
/// realized durations.
pub fn benchmark(
    checkpoint: &Checkpoint,
    texts: &[String],
    batch_size: usize,
    repeats: usize,
) -> Result<BenchmarkReport> {
    if texts.is_empty() {
        return Err(Error::Empty("no utterances to benchmark".into()));
    }
    if batch_size == 0 || repeats == 0 {
        return Err(Error::Config("batch size and repeats must be positive".into()));
    }
    let sequences = texts
        .iter()
        .map(|t| checkpoint.vocabulary.encode(t).map(|(_, ids)| TokenSequence::new(ids)))
        .collect::<Result<Vec<_>>>()?;
    let frame_seconds = checkpoint.audio.frame_seconds();
    let controls = InferControls::default();
    let run_batch = |batch: &[TokenSequence]| -> Result<f64> {
        let mut frames = 0usize;
        for seq in batch {
            frames += checkpoint
                .model
                .forward_infer(seq, &controls)?
                .durations
                .iter()
                .sum::<usize>();
        }
        Ok(frames as f64 * frame_seconds)
    };
    for batch in sequences.chunks(batch_size) {
        run_batch(batch)?;
    }
    let mut timings = Vec::new();
    for _ in 0..repeats {
        for batch in sequences.chunks(batch_size) {
            let start = Instant::now();
            let audio = run_batch(batch)?;
            timings.push((audio, start.elapsed().as_secs_f64()));
        }
    }
    summarize_timings(&timings, batch_size, texts.len(), repeats)
}
