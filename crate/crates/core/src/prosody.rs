//! Per-symbol conditioning signals: durations from attention alignments
//! and voiced-frame pitch averages with corpus standardization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::FramePitch;
use crate::error::{Error, Result};

/// `n × t` alignment weights between input symbols (rows) and frames
/// (columns), stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    symbols: usize,
    frames: usize,
    weights: Vec<f64>,
}

impl AttentionMatrix {
    pub fn new(symbols: usize, frames: usize, weights: Vec<f64>) -> Result<Self> {
        if symbols == 0 || frames == 0 {
            return Err(Error::Empty(
                "attention matrix needs at least one row and column".into(),
            ));
        }
        if weights.len() != symbols * frames {
            return Err(Error::shape(
                "attention",
                format!("{symbols}x{frames}"),
                format!("{} values", weights.len()),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::OutOfRange(
                "attention weights must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            symbols,
            frames,
            weights,
        })
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, symbol: usize, frame: usize) -> f64 {
        self.weights[symbol * self.frames + frame]
    }

    /// A hard alignment that puts all weight of each frame on its symbol.
    pub fn from_durations(durations: &[usize]) -> Result<Self> {
        let frames: usize = durations.iter().sum();
        let mut weights = vec![0.0; durations.len() * frames];
        let mut col = 0;
        for (row, &d) in durations.iter().enumerate() {
            for c in col..col + d {
                weights[row * frames + c] = 1.0;
            }
            col += d;
        }
        Self::new(durations.len(), frames, weights)
    }
}

/// Frames per symbol: symbol `i` receives every frame whose column argmax
/// is row `i`. Ties go to the lowest row.
pub fn extract_durations(attention: &AttentionMatrix) -> Vec<usize> {
    let mut durations = vec![0; attention.symbols];
    for c in 0..attention.frames {
        let mut best = 0;
        for r in 1..attention.symbols {
            if attention.get(r, c) > attention.get(best, c) {
                best = r;
            }
        }
        durations[best] += 1;
    }
    durations
}

/// Per-symbol Hz means over voiced frames; `None` marks symbols with no
/// voiced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolPitch {
    pub hz: Vec<Option<f64>>,
    pub voiced_fraction: Vec<f64>,
}

fn check_total(fp: &FramePitch, durations: &[usize]) -> Result<()> {
    let total: usize = durations.iter().sum();
    if total != fp.len() {
        return Err(Error::LengthMismatch {
            what: "sum of durations vs pitch frames".into(),
            expected: fp.len(),
            got: total,
        });
    }
    if fp.voiced.len() != fp.f0_hz.len() {
        return Err(Error::LengthMismatch {
            what: "voicing flags vs pitch frames".into(),
            expected: fp.f0_hz.len(),
            got: fp.voiced.len(),
        });
    }
    Ok(())
}

fn voiced_mean(fp: &FramePitch, range: std::ops::Range<usize>) -> (Option<f64>, usize) {
    let (sum, count) = range
        .filter(|&i| fp.voiced[i])
        .fold((0.0, 0usize), |(s, c), i| (s + fp.f0_hz[i], c + 1));
    ((count > 0).then(|| sum / count as f64), count)
}

pub fn average_pitch(fp: &FramePitch, durations: &[usize]) -> Result<SymbolPitch> {
    check_total(fp, durations)?;
    let mut hz = Vec::with_capacity(durations.len());
    let mut voiced_fraction = Vec::with_capacity(durations.len());
    let mut start = 0;
    for &d in durations {
        let (mean, count) = voiced_mean(fp, start..start + d);
        hz.push(mean);
        voiced_fraction.push(if d == 0 { 0.0 } else { count as f64 / d as f64 });
        start += d;
    }
    Ok(SymbolPitch { hz, voiced_fraction })
}

/// Splits each symbol's span into three contiguous parts (remainder frames
/// go to the earlier parts) and averages each over voiced frames.
pub fn average_pitch_thirds(fp: &FramePitch, durations: &[usize]) -> Result<Vec<[Option<f64>; 3]>> {
    check_total(fp, durations)?;
    let mut out = Vec::with_capacity(durations.len());
    let mut start = 0;
    for &d in durations {
        let mut parts = [None; 3];
        let mut s = start;
        for (k, part) in parts.iter_mut().enumerate() {
            let len = d / 3 + usize::from(k < d % 3);
            *part = voiced_mean(fp, s..s + len).0;
            s += len;
        }
        out.push(parts);
        start += d;
    }
    Ok(out)
}

/// Voiced-frame pitch moments of a training corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchStats {
    pub mean_hz: f64,
    pub std_hz: f64,
}

impl PitchStats {
    pub fn new(mean_hz: f64, std_hz: f64) -> Result<Self> {
        if !(std_hz > 0.0 && std_hz.is_finite() && mean_hz.is_finite()) {
            return Err(Error::Degenerate(format!(
                "pitch standard deviation must be positive and finite (got {std_hz})"
            )));
        }
        Ok(Self { mean_hz, std_hz })
    }

    fn validate(&self) -> Result<()> {
        Self::new(self.mean_hz, self.std_hz).map(|_| ())
    }

    pub fn standardize_value(&self, hz: f64) -> f64 {
        (hz - self.mean_hz) / self.std_hz
    }

    pub fn de_standardize_value(&self, z: f64) -> f64 {
        self.mean_hz + self.std_hz * z
    }

    /// Voiced entries map to z-scores; missing entries map to exactly 0.
    pub fn standardize(&self, values: &[Option<f64>]) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(values
            .iter()
            .map(|v| v.map_or(0.0, |hz| self.standardize_value(hz)))
            .collect())
    }

    /// Inverse of [`standardize`](Self::standardize); zero entries are read
    /// back as "no pitch".
    pub fn de_standardize(&self, values: &[f64]) -> Vec<Option<f64>> {
        values
            .iter()
            .map(|&z| (z != 0.0).then(|| self.de_standardize_value(z)))
            .collect()
    }
}

/// Mean and population standard deviation over every voiced frame.
pub fn compute_corpus_stats<'a>(corpus: impl IntoIterator<Item = &'a FramePitch>) -> Result<PitchStats> {
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut voiced = Vec::new();
    for fp in corpus {
        for (&f, &v) in fp.f0_hz.iter().zip(&fp.voiced) {
            if v {
                count += 1;
                sum += f;
                voiced.push(f);
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("corpus has no voiced frames".into()));
    }
    let mean = sum / count as f64;
    let var = voiced.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / count as f64;
    PitchStats::new(mean, var.sqrt())
}

/// Model conditioning for one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolProsody {
    /// Standardized; 0 for symbols without pitch.
    pub pitch: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch3: Option<Vec<[f64; 3]>>,
    pub durations: Vec<usize>,
}

impl SymbolProsody {
    pub fn from_frames(fp: &FramePitch, durations: Vec<usize>, stats: &PitchStats, with_thirds: bool) -> Result<Self> {
        let pitch = stats.standardize(&average_pitch(fp, &durations)?.hz)?;
        let pitch3 = if with_thirds {
            let thirds = average_pitch_thirds(fp, &durations)?;
            Some(
                thirds
                    .iter()
                    .map(|row| {
                        let z = stats.standardize(row)?;
                        Ok([z[0], z[1], z[2]])
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            pitch,
            pitch3,
            durations,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    /// Frames spread as evenly as possible, remainder to earlier symbols.
    Uniform,
    /// Random monotonic split; every symbol gets a frame when `t ≥ n`.
    Random,
}

/// Stand-in durations for corpora without teacher alignments. Always sums
/// to `frames`.
pub fn synthetic_durations<R: Rng>(
    symbols: usize,
    frames: usize,
    mode: AlignmentMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if symbols == 0 {
        return Err(Error::Empty("no symbols to align".into()));
    }
    match mode {
        AlignmentMode::Uniform => Ok((0..symbols)
            .map(|i| frames / symbols + usize::from(i < frames % symbols))
            .collect()),
        AlignmentMode::Random => {
            let floor = usize::from(frames >= symbols);
            let spare = frames - floor * symbols;
            let mut cuts: Vec<usize> = (0..symbols - 1).map(|_| rng.gen_range(0..=spare)).collect();
            cuts.sort_unstable();
            let mut prev = 0;
            let mut out = Vec::with_capacity(symbols);
            for c in cuts.into_iter().chain(std::iter::once(spare)) {
                out.push(floor + c - prev);
                prev = c;
            }
            Ok(out)
        }
    }
}
