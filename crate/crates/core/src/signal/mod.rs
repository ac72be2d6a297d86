//! Deterministic DSP primitives: waveforms, STFT analysis/synthesis, ERB
//! features, mask expansion and SNR-controlled mixing.

mod erb;
mod mix;
mod stft;
pub mod wav;

pub use erb::{
    apply_erb_mask, erb_features, erb_rate, inverse_erb_rate, make_erb_filterbank, ErbFeatures,
    ErbFilterbank,
};
pub use mix::{fit_length, mix_at_snr, power, POWER_FLOOR};
pub use stft::{istft, stft, ComplexSpectrogram, Stft, StftConfig, Window};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// A mono signal. Samples are finite and there is at least one of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "waveform sample {i} is not finite"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Shorthand for a 16 kHz waveform.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len.max(1)],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    /// Copy of `len` samples starting at `start`.
    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::InvalidInput(format!(
                "segment [{start}, {}) outside waveform of {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Ok(Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}
