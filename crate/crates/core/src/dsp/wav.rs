//! 16-bit PCM mono WAV reading and writing.

use std::io::{Cursor, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

fn spec(sample_rate: u32) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected 16-bit PCM mono, found {} channel(s) at {} bits",
                spec.channels, spec.bits_per_sample
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioClip::new(samples, spec.sample_rate)
}

fn write_samples<W: Write + Seek>(writer: W, clip: &AudioClip) -> Result<()> {
    let mut w = WavWriter::new(writer, spec(clip.sample_rate))?;
    for &s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Samples outside [−1, 1] are clipped.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(std::io::BufWriter::new(file), clip)
}

/// The clip encoded as an in-memory RIFF/WAV file.
pub fn wav_bytes(clip: &AudioClip) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    write_samples(&mut cursor, clip)?;
    Ok(cursor.into_inner())
}

/// Scales the clip so its peak sits at `target` (no-op for silence).
pub fn normalize_peak(clip: &mut AudioClip, target: f64) {
    let peak = clip.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let gain = target / peak;
        clip.samples.iter_mut().for_each(|s| *s *= gain);
    }
}
