//! Autocorrelation pitch tracking with Viterbi path selection.
//!
//! Each analysis frame is centered on the same sample as the matching mel
//! frame, so the tracker emits exactly one estimate per mel frame.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::stft::hann_symmetric;
use super::AudioClip;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchConfig {
    pub f_min: f64,
    pub f_max: f64,
    /// Must match the mel hop so frames line up.
    pub hop_length: usize,
    /// Lower bound on the analysis window; the window also spans at least
    /// three periods of `f_min`.
    pub min_window: usize,
    pub silence_threshold: f64,
    pub voicing_threshold: f64,
    pub octave_cost: f64,
    pub octave_jump_cost: f64,
    pub voiced_unvoiced_cost: f64,
    /// Including the unvoiced candidate.
    pub max_candidates: usize,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            f_min: 40.0,
            f_max: 600.0,
            hop_length: 256,
            min_window: 1024,
            silence_threshold: 0.03,
            voicing_threshold: 0.45,
            octave_cost: 0.01,
            octave_jump_cost: 0.35,
            voiced_unvoiced_cost: 0.14,
            max_candidates: 15,
        }
    }
}

impl PitchConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.f_min > 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "pitch range must satisfy 0 < f_min < f_max <= {nyquist} (got {}..{})",
                self.f_min, self.f_max
            )));
        }
        if self.hop_length == 0 || self.max_candidates < 2 {
            return Err(Error::Config(
                "hop_length must be positive and max_candidates at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn window_length(&self, sample_rate: u32) -> usize {
        let periods = (3.0 * sample_rate as f64 / self.f_min).round() as usize;
        self.min_window.max(periods)
    }

    /// Transition costs scaled to the frame step (costs are specified per
    /// 10 ms).
    pub fn transition_costs(&self, sample_rate: u32) -> TransitionCosts {
        let dt = self.hop_length as f64 / sample_rate as f64;
        let correction = 0.01 / dt;
        TransitionCosts {
            octave_jump: self.octave_jump_cost * correction,
            voiced_unvoiced: self.voiced_unvoiced_cost * correction,
        }
    }
}

/// Per-frame F0 in Hz; zero where unvoiced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePitch {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl FramePitch {
    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    /// Builds a contour from Hz values, treating non-positive entries as
    /// unvoiced.
    pub fn from_hz(f0_hz: Vec<f64>) -> Self {
        let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
        let f0_hz = f0_hz.into_iter().map(|f| f.max(0.0)).collect();
        Self { f0_hz, voiced }
    }

    pub fn voiced_fraction(&self) -> f64 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f64 / self.voiced.len() as f64
    }
}

/// One path option in a frame. `frequency == 0` marks the unvoiced option.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub frequency: f64,
    pub strength: f64,
}

impl Candidate {
    pub fn unvoiced(strength: f64) -> Self {
        Self {
            frequency: 0.0,
            strength,
        }
    }

    pub fn is_voiced(&self) -> bool {
        self.frequency > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionCosts {
    pub octave_jump: f64,
    pub voiced_unvoiced: f64,
}

impl TransitionCosts {
    fn between(&self, from: &Candidate, to: &Candidate) -> f64 {
        match (from.is_voiced(), to.is_voiced()) {
            (false, false) => 0.0,
            (true, true) => self.octave_jump * (from.frequency / to.frequency).log2().abs(),
            _ => self.voiced_unvoiced,
        }
    }
}

/// Cost of a path: transition costs minus candidate strengths, accumulated
/// frame by frame in the same order the dynamic program uses.
pub fn path_cost(frames: &[Vec<Candidate>], path: &[usize], costs: &TransitionCosts) -> f64 {
    let mut total = 0.0;
    for (t, (&j, cands)) in path.iter().zip(frames).enumerate() {
        let trans = if t == 0 {
            0.0
        } else {
            costs.between(&frames[t - 1][path[t - 1]], &cands[j])
        };
        total = (total + trans) - cands[j].strength;
    }
    total
}

/// Least-cost candidate path. Ties resolve to the lower candidate index.
pub fn viterbi(frames: &[Vec<Candidate>], costs: &TransitionCosts) -> Vec<usize> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut acc: Vec<f64> = frames[0].iter().map(|c| 0.0 - c.strength).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    back.push(vec![0; frames[0].len()]);
    for t in 1..frames.len() {
        let prev = &frames[t - 1];
        let mut next = Vec::with_capacity(frames[t].len());
        let mut ptr = Vec::with_capacity(frames[t].len());
        for cand in &frames[t] {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for (i, p) in prev.iter().enumerate() {
                let v = acc[i] + costs.between(p, cand);
                if v < best {
                    best = v;
                    arg = i;
                }
            }
            next.push(best - cand.strength);
            ptr.push(arg);
        }
        acc = next;
        back.push(ptr);
    }
    let mut last = 0;
    for (j, &v) in acc.iter().enumerate() {
        if v < acc[last] {
            last = j;
        }
    }
    let mut path = vec![0; frames.len()];
    path[frames.len() - 1] = last;
    for t in (1..frames.len()).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

struct Analyzer {
    window: Vec<f64>,
    window_ac: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    fft_len: usize,
    min_lag: usize,
    max_lag: usize,
}

impl Analyzer {
    fn new(cfg: &PitchConfig, sample_rate: u32) -> Self {
        let n = cfg.window_length(sample_rate);
        let window = hann_symmetric(n);
        let sr = sample_rate as f64;
        let min_lag = ((sr / cfg.f_max).floor() as usize).max(1);
        let max_lag = ((sr / cfg.f_min).ceil() as usize).min(n.saturating_sub(2));
        let fft_len = (n + max_lag + 2).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(fft_len);
        let ifft = planner.plan_fft_inverse(fft_len);
        let mut analyzer = Self {
            window,
            window_ac: Vec::new(),
            fft,
            ifft,
            fft_len,
            min_lag,
            max_lag,
        };
        let w = analyzer.window.clone();
        analyzer.window_ac = analyzer.autocorrelation(&w);
        analyzer
    }

    /// Autocorrelation for lags `0..=max_lag + 1`, normalized to lag 0.
    fn autocorrelation(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .map(|&x| Complex64::new(x, 0.0))
            .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
            .take(self.fft_len)
            .collect();
        self.fft.process(&mut buf);
        for c in buf.iter_mut() {
            *c = Complex64::new(c.norm_sqr(), 0.0);
        }
        self.ifft.process(&mut buf);
        let r0 = buf[0].re;
        (0..=self.max_lag + 1)
            .map(|lag| if r0 > 0.0 { buf[lag].re / r0 } else { 0.0 })
            .collect()
    }
}

/// Per-frame F0 track aligned with the mel frames of the same clip.
pub fn track_pitch(clip: &AudioClip, cfg: &PitchConfig) -> Result<FramePitch> {
    if clip.samples.is_empty() {
        return Err(Error::Empty("clip has no samples".into()));
    }
    cfg.validate(clip.sample_rate)?;
    let sr = clip.sample_rate as f64;
    let analyzer = Analyzer::new(cfg, clip.sample_rate);
    let n_frames = clip.samples.len() / cfg.hop_length + 1;
    let global_peak = clip.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let win = analyzer.window.len();

    let mut frames = Vec::with_capacity(n_frames);
    let mut frame = vec![0.0; win];
    for f in 0..n_frames {
        let start = (f * cfg.hop_length) as isize - (win / 2) as isize;
        for (i, slot) in frame.iter_mut().enumerate() {
            let idx = start + i as isize;
            *slot = if idx >= 0 && (idx as usize) < clip.samples.len() {
                clip.samples[idx as usize]
            } else {
                0.0
            };
        }
        frames.push(frame_candidates(&frame, global_peak, &analyzer, cfg, sr));
    }

    let path = viterbi(&frames, &cfg.transition_costs(clip.sample_rate));
    let f0_hz: Vec<f64> = path.iter().zip(&frames).map(|(&j, cands)| cands[j].frequency).collect();
    let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
    Ok(FramePitch { f0_hz, voiced })
}

fn frame_candidates(raw: &[f64], global_peak: f64, analyzer: &Analyzer, cfg: &PitchConfig, sr: f64) -> Vec<Candidate> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let centered: Vec<f64> = raw.iter().map(|x| x - mean).collect();
    let local_peak = centered.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if global_peak == 0.0 || local_peak == 0.0 {
        return vec![Candidate::unvoiced(cfg.voicing_threshold + 2.0)];
    }
    let relative = (local_peak / global_peak) / (cfg.silence_threshold / (1.0 + cfg.voicing_threshold));
    let mut cands = vec![Candidate::unvoiced(cfg.voicing_threshold + (2.0 - relative).max(0.0))];

    let windowed: Vec<f64> = centered.iter().zip(&analyzer.window).map(|(x, w)| x * w).collect();
    let ac = analyzer.autocorrelation(&windowed);
    let r: Vec<f64> = ac
        .iter()
        .zip(&analyzer.window_ac)
        .map(|(a, w)| if *w > 0.0 { a / w } else { 0.0 })
        .collect();

    let mut voiced = Vec::new();
    for lag in analyzer.min_lag.max(1)..=analyzer.max_lag {
        let (prev, here, next) = (r[lag - 1], r[lag], r[lag + 1]);
        if !(here > prev && here >= next && here > 0.5 * cfg.voicing_threshold) {
            continue;
        }
        let curvature = prev - 2.0 * here + next;
        let (offset, mut peak) = if curvature < 0.0 {
            let d = 0.5 * (prev - next) / curvature;
            (d, here - 0.25 * (prev - next) * d)
        } else {
            (0.0, here)
        };
        let frequency = sr / (lag as f64 + offset);
        if frequency < cfg.f_min || frequency > cfg.f_max {
            continue;
        }
        if peak > 1.0 {
            peak = 1.0 / peak;
        }
        let strength = peak + cfg.octave_cost * (frequency / cfg.f_min).log2();
        voiced.push((lag, Candidate { frequency, strength }));
    }
    // Keep the strongest, then order by lag so candidate indices are stable.
    voiced.sort_by(|a, b| b.1.strength.total_cmp(&a.1.strength).then(a.0.cmp(&b.0)));
    voiced.truncate(cfg.max_candidates - 1);
    voiced.sort_by_key(|(lag, _)| *lag);
    cands.extend(voiced.into_iter().map(|(_, c)| c));
    cands
}
