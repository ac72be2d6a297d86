//! Mono 16 kHz WAV input/output (16-bit PCM or 32-bit float).

use std::path::Path;

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(path: &Path, source: hound::Error) -> Error {
    match source {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Wav {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Reads a mono 16 kHz file. Stereo input and other sample rates are
/// rejected rather than converted.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} channels; only mono input is supported", spec.channels),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!(
                "sample rate {} Hz; expected {SAMPLE_RATE} Hz",
                spec.sample_rate
            ),
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("unsupported sample format {fmt:?} with {bits} bits"),
            })
        }
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn write_wav(path: &Path, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => hound::SampleFormat::Int,
            WavEncoding::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in wave.samples() {
        let res = match encoding {
            WavEncoding::Pcm16 => {
                writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
            }
            WavEncoding::Float32 => writer.write_sample(s as f32),
        };
        res.map_err(|e| wav_err(path, e))?;
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}
