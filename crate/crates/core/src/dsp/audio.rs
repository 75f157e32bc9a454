use std::path::Path;

use crate::error::{PcqError, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// 3 s at 16 kHz.
pub const SEGMENT_LEN: usize = 48_000;

/// Mono PCM audio at 16 kHz, samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(
        source_id: impl Into<String>,
        samples: Vec<f32>,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        let clip = AudioClip {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(PcqError::InvalidInput(format!(
                "{}: sample rate {} Hz, expected {SAMPLE_RATE_HZ} Hz",
                self.source_id, self.sample_rate_hz
            )));
        }
        if self.samples.is_empty() {
            return Err(PcqError::InvalidInput(format!(
                "{}: empty clip",
                self.source_id
            )));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Exactly 48000 samples cut from a clip; the final segment is zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Vec<f32>,
    pub parent_id: String,
    pub index: usize,
}

impl Segment {
    pub fn new(parent_id: impl Into<String>, index: usize, samples: Vec<f32>) -> Result<Self> {
        if samples.len() != SEGMENT_LEN {
            return Err(PcqError::InvalidInput(format!(
                "segment must hold {SEGMENT_LEN} samples, got {}",
                samples.len()
            )));
        }
        Ok(Segment {
            samples,
            parent_id: parent_id.into(),
            index,
        })
    }
}

/// Splits a clip into `ceil(len / 48000)` segments, zero-padding the last.
pub fn segment_clip(clip: &AudioClip) -> Result<Vec<Segment>> {
    clip.validate()?;
    Ok(clip
        .samples
        .chunks(SEGMENT_LEN)
        .enumerate()
        .map(|(index, chunk)| {
            let mut samples = chunk.to_vec();
            samples.resize(SEGMENT_LEN, 0.0);
            Segment {
                samples,
                parent_id: clip.source_id.clone(),
                index,
            }
        })
        .collect())
}

/// Reads a mono 16 kHz WAV (PCM16 or float32).
pub fn read_wav(path: &Path, source_id: &str) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| PcqError::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(PcqError::InvalidInput(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    let wav_err = |e: hound::Error| PcqError::Data(format!("{}: {e}", path.display()));
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(PcqError::InvalidInput(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    AudioClip::new(source_id, samples, spec.sample_rate)
}

/// Writes a mono 16 kHz PCM16 WAV. Samples are clamped to `[-1, 1]`.
pub fn write_wav_pcm16(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| PcqError::Data(format!("{}: {e}", path.display()));
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}
