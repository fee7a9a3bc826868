//! Corpus manifests, feature extraction, the on-disk feature layout, and a
//! scripted synthetic corpus for tests and demos.
//!
//! A preprocessed directory looks like
//!
//! ```text
//! metadata.json              configs, vocabulary, per-utterance sizes, skips
//! stats.json                 corpus pitch statistics
//! utterances/<id>/mel        [t × n_mels]
//! utterances/<id>/f0         [t], Hz with 0 for unvoiced frames
//! utterances/<id>/durations  [n] frames per symbol
//! utterances/<id>/tokens     [n]
//! utterances/<id>/pitch      [n × 1] standardized
//! utterances/<id>/pitch3     [n × 3] standardized
//! ```
//!
//! where every entry is a tensor file pair (see [`crate::tensor_file`]).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::{mel_spectrogram, track_pitch, AudioClip, FramePitch, MelConfig, MelSpectrogram, PitchConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Speaker, TokenSequence, TrainExample};
use crate::numerics::Tensor;
use crate::prosody::{
    compute_corpus_stats, extract_durations, synthetic_durations, AlignmentMode, AttentionMatrix, PitchStats,
    SymbolProsody,
};
use crate::tensor_file::{read_indices, read_tensor, write_indices, write_tensor, Sidecar};
use crate::text::Vocabulary;
use crate::training::TrainConfig;

pub const METADATA_FILE: &str = "metadata.json";
pub const STATS_FILE: &str = "stats.json";
const UTTERANCE_DIR: &str = "utterances";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub wav_path: PathBuf,
    pub transcript: String,
    pub speaker_id: usize,
}

impl ManifestEntry {
    /// The WAV file stem, used to name feature and alignment files.
    pub fn id(&self) -> String {
        self.wav_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Parses `wav_path|transcript|speaker_id` lines. The speaker column is
/// optional (default 0); relative paths resolve against `base`. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let bad = |line: usize, msg: String| Error::Format {
        path: base.to_path_buf(),
        msg: format!("manifest line {}: {msg}", line + 1),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split('|').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(bad(
                    i,
                    format!("expected 2 or 3 '|'-separated fields, found {}", fields.len()),
                ));
            }
            let transcript = fields[1].trim();
            if transcript.is_empty() {
                return Err(bad(i, "empty transcript".into()));
            }
            let speaker_id = match fields.get(2) {
                Some(s) => s.trim().parse().map_err(|_| bad(i, format!("bad speaker id {s:?}")))?,
                None => 0,
            };
            Ok(ManifestEntry {
                wav_path: base.join(fields[0].trim()),
                transcript: transcript.to_string(),
                speaker_id,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// Where symbol durations come from.
#[derive(Clone, Debug, PartialEq)]
pub enum AlignmentSource {
    /// Attention matrices stored as tensor files `<dir>/<id>` of shape
    /// `[symbols × frames]`.
    Attention(PathBuf),
    Synthetic(AlignmentMode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub mel: MelConfig,
    pub pitch: PitchConfig,
    pub alignment: AlignmentSource,
    pub seed: u64,
}

/// Features of one utterance before corpus statistics are known.
#[derive(Clone, Debug)]
pub struct UtteranceFeatures {
    pub id: String,
    pub transcript: String,
    pub speaker_id: usize,
    pub symbols: Vec<char>,
    pub tokens: Vec<usize>,
    pub mel: MelSpectrogram,
    pub frame_pitch: FramePitch,
    pub durations: Vec<usize>,
}

impl UtteranceFeatures {
    pub fn frames(&self) -> usize {
        self.mel.n_frames()
    }
}

/// Mel, pitch track and durations for one clip. `index` selects the
/// synthetic-alignment random stream so results do not depend on
/// processing order.
pub fn extract_features(
    entry: &ManifestEntry,
    clip: &AudioClip,
    index: usize,
    vocabulary: &Vocabulary,
    cfg: &PreprocessConfig,
) -> Result<UtteranceFeatures> {
    let id = entry.id();
    let (symbols, tokens) = vocabulary.encode(&entry.transcript)?;
    let normalized: String = symbols.iter().collect();
    if normalized != entry.transcript.trim() {
        log::warn!(
            "{id}: transcript normalized from {:?} to {normalized:?}",
            entry.transcript
        );
    }
    let mel = mel_spectrogram(clip, &cfg.mel)?;
    let frame_pitch = track_pitch(clip, &cfg.pitch)?;
    let frames = mel.n_frames();
    if frame_pitch.len() != frames {
        return Err(Error::LengthMismatch {
            what: format!("{id}: pitch frames vs mel frames"),
            expected: frames,
            got: frame_pitch.len(),
        });
    }
    let durations = match &cfg.alignment {
        AlignmentSource::Attention(dir) => {
            let (weights, _) = read_tensor(&dir.join(&id))?;
            if weights.shape().len() != 2 || weights.rows() != symbols.len() {
                return Err(Error::LengthMismatch {
                    what: format!("{id}: attention rows vs symbols"),
                    expected: symbols.len(),
                    got: weights.shape().first().copied().unwrap_or(0),
                });
            }
            let (rows, cols) = (weights.rows(), weights.cols());
            extract_durations(&AttentionMatrix::new(rows, cols, weights.into_data())?)
        }
        AlignmentSource::Synthetic(mode) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index as u64);
            synthetic_durations(symbols.len(), frames, *mode, &mut rng)?
        }
    };
    let total: usize = durations.iter().sum();
    if total != frames {
        return Err(Error::LengthMismatch {
            what: format!("{id}: sum of durations vs mel frames"),
            expected: frames,
            got: total,
        });
    }
    Ok(UtteranceFeatures {
        id,
        transcript: entry.transcript.clone(),
        speaker_id: entry.speaker_id,
        symbols,
        tokens,
        mel,
        frame_pitch,
        durations,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub id: String,
    pub transcript: String,
    pub speaker_id: usize,
    pub symbols: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedUtterance {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub mel: MelConfig,
    pub pitch: PitchConfig,
    pub vocabulary: Vocabulary,
    pub utterances: Vec<UtteranceMeta>,
    pub skipped: Vec<SkippedUtterance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessSummary {
    pub utterances: usize,
    pub skipped: usize,
    pub frames: usize,
    /// Over all frames of the kept utterances.
    pub voiced_fraction: f64,
    pub stats: PitchStats,
}

/// Extracts features for every manifest entry (in parallel on the current
/// rayon pool), computes corpus pitch statistics and writes the feature
/// layout under `out_dir`. Utterances that fail extraction are skipped and
/// listed in the metadata; it is an error if none survive.
pub fn preprocess(
    entries: &[ManifestEntry],
    vocabulary: &Vocabulary,
    cfg: &PreprocessConfig,
    out_dir: &Path,
) -> Result<PreprocessSummary> {
    if entries.is_empty() {
        return Err(Error::Empty("manifest has no utterances".into()));
    }
    cfg.mel.validate()?;
    cfg.pitch.validate(cfg.mel.sample_rate)?;
    if cfg.pitch.hop_length != cfg.mel.hop_length {
        return Err(Error::Config(format!(
            "pitch hop {} must equal mel hop {}",
            cfg.pitch.hop_length, cfg.mel.hop_length
        )));
    }
    let results: Vec<Result<UtteranceFeatures>> = entries
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let clip = read_wav(&entry.wav_path)?;
            extract_features(entry, &clip, i, vocabulary, cfg)
        })
        .collect();

    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (entry, result) in entries.iter().zip(results) {
        match result {
            Ok(features) => kept.push(features),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.id());
                skipped.push(SkippedUtterance {
                    id: entry.id(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::Empty(format!("all {} utterances were skipped", entries.len())));
    }
    let stats = compute_corpus_stats(kept.iter().map(|u| &u.frame_pitch))?;

    let utt_root = out_dir.join(UTTERANCE_DIR);
    fs::create_dir_all(&utt_root).map_err(|e| Error::io(&utt_root, e))?;
    kept.par_iter()
        .map(|u| write_utterance(&utt_root.join(&u.id), u, &stats, &cfg.mel))
        .collect::<Result<Vec<()>>>()?;

    let frames: usize = kept.iter().map(UtteranceFeatures::frames).sum();
    let voiced: usize = kept
        .iter()
        .map(|u| u.frame_pitch.voiced.iter().filter(|&&v| v).count())
        .sum();
    let metadata = DatasetMetadata {
        mel: cfg.mel.clone(),
        pitch: cfg.pitch.clone(),
        vocabulary: vocabulary.clone(),
        utterances: kept
            .iter()
            .map(|u| UtteranceMeta {
                id: u.id.clone(),
                transcript: u.transcript.clone(),
                speaker_id: u.speaker_id,
                symbols: u.symbols.len(),
                frames: u.frames(),
            })
            .collect(),
        skipped,
    };
    write_json(&out_dir.join(METADATA_FILE), &metadata)?;
    write_json(&out_dir.join(STATS_FILE), &stats)?;
    Ok(PreprocessSummary {
        utterances: kept.len(),
        skipped: metadata.skipped.len(),
        frames,
        voiced_fraction: voiced as f64 / frames as f64,
        stats,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn to_i64(values: &[usize]) -> Vec<i64> {
    values.iter().map(|&v| v as i64).collect()
}

fn write_utterance(dir: &Path, u: &UtteranceFeatures, stats: &PitchStats, mel_cfg: &MelConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prosody = SymbolProsody::from_frames(&u.frame_pitch, u.durations.clone(), stats, true)?;
    let audio =
        |shape| Sidecar::new(shape, crate::tensor_file::Dtype::F64).with_audio(mel_cfg.sample_rate, mel_cfg.hop_length);
    write_tensor(&dir.join("mel"), &u.mel.frames, Some(audio(vec![])))?;
    write_tensor(
        &dir.join("f0"),
        &Tensor::vector(u.frame_pitch.f0_hz.clone()),
        Some(audio(vec![])),
    )?;
    write_indices(&dir.join("durations"), &to_i64(&u.durations))?;
    write_indices(&dir.join("tokens"), &to_i64(&u.tokens))?;
    let n = prosody.pitch.len();
    write_tensor(&dir.join("pitch"), &Tensor::matrix(n, 1, prosody.pitch)?, None)?;
    let thirds = prosody
        .pitch3
        .expect("requested thirds")
        .into_iter()
        .flatten()
        .collect();
    write_tensor(&dir.join("pitch3"), &Tensor::matrix(n, 3, thirds)?, None)
}

/// A preprocessed corpus ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub metadata: DatasetMetadata,
    pub stats: PitchStats,
    pub examples: Vec<TrainExample>,
}

fn to_usize(values: Vec<i64>, path: &Path) -> Result<Vec<usize>> {
    values
        .into_iter()
        .map(|v| {
            usize::try_from(v).map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: format!("negative entry {v}"),
            })
        })
        .collect()
}

/// Loads a directory written by [`preprocess`]. `pitch_values_per_symbol`
/// (1 or 3) selects the `pitch` or `pitch3` targets. Any utterance whose
/// durations do not sum to its frame count is rejected.
pub fn load_dataset(dir: &Path, pitch_values_per_symbol: usize) -> Result<Dataset> {
    let pitch_file = match pitch_values_per_symbol {
        1 => "pitch",
        3 => "pitch3",
        other => {
            return Err(Error::Config(format!(
                "pitch values per symbol must be 1 or 3, got {other}"
            )))
        }
    };
    let metadata: DatasetMetadata = read_json(&dir.join(METADATA_FILE))?;
    let stats: PitchStats = read_json(&dir.join(STATS_FILE))?;
    let examples = metadata
        .utterances
        .iter()
        .map(|meta| {
            let udir = dir.join(UTTERANCE_DIR).join(&meta.id);
            let (mel, _) = read_tensor(&udir.join("mel"))?;
            let durations = to_usize(read_indices(&udir.join("durations"))?, &udir)?;
            let tokens = to_usize(read_indices(&udir.join("tokens"))?, &udir)?;
            let (pitch, _) = read_tensor(&udir.join(pitch_file))?;
            let total: usize = durations.iter().sum();
            if mel.shape().len() != 2 || total != mel.rows() {
                return Err(Error::LengthMismatch {
                    what: format!("{}: sum of durations vs mel frames", meta.id),
                    expected: mel.shape().first().copied().unwrap_or(0),
                    got: total,
                });
            }
            Ok(TrainExample {
                tokens: TokenSequence::new(tokens).with_speaker(Speaker::Id(meta.speaker_id)),
                pitch,
                durations,
                mel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        metadata,
        stats,
        examples,
    })
}

/// Transcripts of the scripted corpus.
pub const TOY_TRANSCRIPTS: [&str; 8] = [
    "a big dog",
    "she sang",
    "ride on",
    "we move",
    "lazy owl",
    "jump high",
    "my queen",
    "fix a cup",
];

/// Letters rendered as noise rather than a harmonic tone.
const TOY_UNVOICED: &str = "fhkpst";

/// Scripted pitch of a toy letter, `None` for noise letters and silence.
pub fn toy_pitch_hz(c: char) -> Option<f64> {
    if c == ' ' || TOY_UNVOICED.contains(c) || !c.is_ascii_lowercase() {
        return None;
    }
    let k = (c as u8 - b'a') as f64;
    Some(100.0 + 10.0 * (k % 11.0))
}

/// Scripted frame count of a toy symbol.
pub fn toy_frames(c: char) -> usize {
    if c.is_ascii_lowercase() {
        4 + (c as u8 - b'a') as usize % 4
    } else {
        4
    }
}

#[derive(Clone, Debug)]
pub struct ToyUtterance {
    pub transcript: String,
    pub durations: Vec<usize>,
    pub clip: AudioClip,
}

/// Renders `transcript` as a sine-carrier signal: each symbol occupies its
/// scripted number of frames, voiced letters as a phase-continuous
/// harmonic tone at their scripted pitch, noise letters as low-level white
/// noise, spaces as silence. The clip length makes the centered STFT
/// produce exactly `Σ durations` frames.
pub fn toy_utterance(transcript: &str, sample_rate: u32, hop: usize, rng: &mut ChaCha8Rng) -> Result<ToyUtterance> {
    let symbols: Vec<char> = transcript.chars().collect();
    if symbols.is_empty() {
        return Err(Error::Empty("toy transcript is empty".into()));
    }
    let durations: Vec<usize> = symbols.iter().map(|&c| toy_frames(c)).collect();
    let frames: usize = durations.iter().sum();
    let frame_symbol: Vec<char> = symbols
        .iter()
        .zip(&durations)
        .flat_map(|(&c, &d)| std::iter::repeat_n(c, d))
        .collect();
    let n_samples = (frames - 1) * hop;
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        // The symbol whose frame center is nearest.
        let frame = ((s as f64 / hop as f64).round() as usize).min(frames - 1);
        let c = frame_symbol[frame];
        let value = match toy_pitch_hz(c) {
            Some(hz) => {
                phase = (phase + 2.0 * std::f64::consts::PI * hz / sample_rate as f64) % (2.0 * std::f64::consts::PI);
                (1..=6).map(|k| (k as f64 * phase).sin() / k as f64).sum::<f64>() * 0.25
            }
            None if c == ' ' => 0.0,
            None => rng.gen_range(-0.05..0.05),
        };
        samples.push(value);
    }
    Ok(ToyUtterance {
        transcript: transcript.to_string(),
        durations,
        clip: AudioClip::new(samples, sample_rate)?,
    })
}

/// Writes `n` scripted utterances (cycling through [`TOY_TRANSCRIPTS`]) as
/// `wavs/toy_NNN.wav`, their scripted alignments as one-hot attention
/// matrices under `alignments/`, and a manifest `metadata.csv`. Returns the
/// manifest path.
pub fn write_toy_corpus(dir: &Path, n: usize, seed: u64, mel: &MelConfig) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Empty("toy corpus needs at least one utterance".into()));
    }
    let wav_dir = dir.join("wavs");
    let align_dir = dir.join("alignments");
    for d in [&wav_dir, &align_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut manifest = String::new();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let transcript = TOY_TRANSCRIPTS[i % TOY_TRANSCRIPTS.len()];
        let utt = toy_utterance(transcript, mel.sample_rate, mel.hop_length, &mut rng)?;
        let id = format!("toy_{i:03}");
        write_wav(&wav_dir.join(format!("{id}.wav")), &utt.clip)?;
        let attention = AttentionMatrix::from_durations(&utt.durations)?;
        let (rows, cols) = (attention.symbols(), attention.frames());
        let weights = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| attention.get(r, c))
            .collect();
        write_tensor(&align_dir.join(&id), &Tensor::matrix(rows, cols, weights)?, None)?;
        manifest.push_str(&format!("wavs/{id}.wav|{transcript}|0\n"));
    }
    let path = dir.join("metadata.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// The small architecture used with the scripted corpus: two layers per
/// stack at width 64.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 2,
        d_ff: 128,
        predictor_channels: 64,
        ..ModelConfig::default()
    }
}

/// Optimizer settings for the scripted corpus: the default recipe with the
/// warmup scaled down to 200 steps and the whole corpus in one batch.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        warmup_steps: 200,
        batch_size: 8,
        max_steps: 2000,
        seed: 1,
        ..TrainConfig::default()
    }
}
