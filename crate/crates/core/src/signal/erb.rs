use ndarray::Array2;
use num_complex::Complex64;

use super::ComplexSpectrogram;
use crate::error::{Error, Result};

/// ERB-rate (Glasberg & Moore) of a frequency in Hz.
pub fn erb_rate(freq_hz: f64) -> f64 {
    21.4 * (1.0 + 0.00437 * freq_hz).log10()
}

pub fn inverse_erb_rate(rate: f64) -> f64 {
    (10f64.powf(rate / 21.4) - 1.0) / 0.00437
}

/// Triangular unit-peak filters with centers equally spaced on the ERB-rate
/// scale from 0 Hz to Nyquist. Adjacent triangles cross at their half
/// heights so the column sums are all one.
#[derive(Debug, Clone, PartialEq)]
pub struct ErbFilterbank {
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
    /// `weights[b][k] / sum_b weights[b][k]`, used to expand band masks to bins.
    expansion: Array2<f64>,
}

impl ErbFilterbank {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn bands(&self) -> usize {
        self.weights.nrows()
    }

    pub fn bins(&self) -> usize {
        self.weights.ncols()
    }

    /// Bands x bins matrix mapping a band mask row to per-bin gains.
    pub fn expansion(&self) -> &Array2<f64> {
        &self.expansion
    }

    /// Transposed weights (bins x bands), for pooling magnitudes into bands.
    pub fn pooling(&self) -> Array2<f64> {
        self.weights.t().to_owned()
    }
}

pub fn make_erb_filterbank(bands: usize, bins: usize, sample_rate: u32) -> Result<ErbFilterbank> {
    if bands < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 ERB bands, got {bands}"
        )));
    }
    if bins < bands {
        return Err(Error::InvalidConfig(format!(
            "{bands} ERB bands cannot exceed {bins} frequency bins"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::InvalidConfig("sample rate must be positive".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let top = erb_rate(nyquist);
    let centers: Vec<f64> = (0..bands)
        .map(|b| inverse_erb_rate(top * b as f64 / (bands - 1) as f64))
        .collect();
    let bin_hz = nyquist / (bins - 1) as f64;
    let mut weights = Array2::zeros((bands, bins));
    for k in 0..bins {
        let f = k as f64 * bin_hz;
        for b in 0..bands {
            let c = centers[b];
            let w = if f <= c {
                if b == 0 {
                    if f == c {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    let lo = centers[b - 1];
                    if f > lo {
                        (f - lo) / (c - lo)
                    } else {
                        0.0
                    }
                }
            } else if b + 1 < bands {
                let hi = centers[b + 1];
                if f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            weights[[b, k]] = w;
        }
    }
    // The last bin sits exactly on the last center; guard rounding at Nyquist.
    weights[[bands - 1, bins - 1]] = 1.0;
    let mut expansion = weights.clone();
    for k in 0..bins {
        let total: f64 = weights.column(k).sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "frequency bin {k} is not covered"
            )));
        }
        expansion.column_mut(k).mapv_inplace(|w| w / total);
    }
    Ok(ErbFilterbank {
        weights,
        centers_hz: centers,
        expansion,
    })
}

/// Compressed band magnitudes, frames x bands.
#[derive(Debug, Clone, PartialEq)]
pub struct ErbFeatures {
    values: Array2<f64>,
    exponent: f64,
}

impl ErbFeatures {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bands(&self) -> usize {
        self.values.ncols()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// `feature[t][b] = (sum_k fb[b][k] |spec[t][k]|)^c`.
pub fn erb_features(spec: &ComplexSpectrogram, fb: &ErbFilterbank, c: f64) -> Result<ErbFeatures> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "compression exponent {c} not in (0, 1]"
        )));
    }
    if fb.bins() != spec.bins() {
        return Err(Error::shape(
            "erb_features",
            format!(
                "filterbank has {} bins, spectrogram {}",
                fb.bins(),
                spec.bins()
            ),
        ));
    }
    let pooled = spec.magnitudes().dot(&fb.weights.t());
    Ok(ErbFeatures {
        values: pooled.mapv(|m| m.powf(c)),
        exponent: c,
    })
}

/// Gates every bin by the filterbank-weighted average of the band mask.
pub fn apply_erb_mask(
    spec: &ComplexSpectrogram,
    mask: &Array2<f64>,
    fb: &ErbFilterbank,
) -> Result<ComplexSpectrogram> {
    if mask.dim() != (spec.frames(), fb.bands()) {
        return Err(Error::shape(
            "apply_erb_mask",
            format!(
                "mask {:?}, expected ({}, {})",
                mask.dim(),
                spec.frames(),
                fb.bands()
            ),
        ));
    }
    if fb.bins() != spec.bins() {
        return Err(Error::shape(
            "apply_erb_mask",
            "filterbank/spectrogram bin mismatch",
        ));
    }
    if let Some(v) = mask.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!("mask value {v} outside [0, 1]")));
    }
    let gain = mask.dot(&fb.expansion);
    let data = ndarray::Zip::from(spec.data())
        .and(&gain)
        .map_collect(|c: &Complex64, g| c * *g);
    ComplexSpectrogram::new(data, spec.config())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, StftConfig, Waveform};

    #[test]
    fn reference_bank_covers_every_bin() {
        let fb = make_erb_filterbank(128, 257, 16_000).unwrap();
        assert_eq!(fb.weights().dim(), (128, 257));
        for k in 0..257 {
            let col = fb.weights().column(k);
            assert!(col.iter().any(|&w| w > 0.0), "bin {k} uncovered");
            assert!(col.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn minimal_bank_partitions_the_band() {
        let fb = make_erb_filterbank(2, 4, 16_000).unwrap();
        assert_eq!(fb.centers_hz()[0], 0.0);
        assert!((fb.centers_hz()[1] - 8000.0).abs() < 1e-6);
        for k in 0..4 {
            let s: f64 = fb.weights().column(k).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(fb.weights().column(k).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn centers_strictly_increase() {
        let fb = make_erb_filterbank(128, 257, 16_000).unwrap();
        assert!(fb.centers_hz().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn too_many_bands_is_a_config_error() {
        assert!(matches!(
            make_erb_filterbank(300, 257, 16_000),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn compression_values() {
        assert_eq!(1f64.powf(0.3), 1.0);
        assert!((8f64.powf(0.3) - 1.866_065_983_073_614).abs() < 1e-12);
    }

    fn sample_spec() -> ComplexSpectrogram {
        let samples: Vec<f64> = (0..2048)
            .map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5)
            .collect();
        stft(&Waveform::from_samples(samples).unwrap(), 512, 256).unwrap()
    }

    #[test]
    fn features_of_zero_spectrogram_are_zero() {
        let fb = make_erb_filterbank(32, 257, 16_000).unwrap();
        let spec = stft(&Waveform::zeros(1024), 512, 256).unwrap();
        let f = erb_features(&spec, &fb, 0.3).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_is_compressed_band_magnitude() {
        let fb = make_erb_filterbank(16, 257, 16_000).unwrap();
        let spec = sample_spec();
        let f = erb_features(&spec, &fb, 0.3).unwrap();
        let mags = spec.magnitudes();
        for (t, b) in [(0, 0), (3, 7), (5, 15)] {
            let pooled: f64 = (0..257).map(|k| fb.weights()[[b, k]] * mags[[t, k]]).sum();
            assert!((f.values()[[t, b]] - pooled.powf(0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_identities() {
        let fb = make_erb_filterbank(32, 257, 16_000).unwrap();
        let spec = sample_spec();
        let frames = spec.frames();
        let ones = apply_erb_mask(&spec, &Array2::ones((frames, 32)), &fb).unwrap();
        for (a, b) in ones.data().iter().zip(spec.data()) {
            assert!((a - b).norm() <= 1e-9 * b.norm().max(1e-300));
        }
        let zeros = apply_erb_mask(&spec, &Array2::zeros((frames, 32)), &fb).unwrap();
        assert!(zeros.data().iter().all(|c| c.norm() == 0.0));
        let half = apply_erb_mask(&spec, &Array2::from_elem((frames, 32), 0.5), &fb).unwrap();
        for (a, b) in half.data().iter().zip(spec.data()) {
            assert!((a - b * 0.5).norm() <= 1e-12 * b.norm().max(1.0));
        }
    }

    #[test]
    fn out_of_range_mask_is_rejected() {
        let fb = make_erb_filterbank(32, 257, 16_000).unwrap();
        let spec = sample_spec();
        let mut mask = Array2::from_elem((spec.frames(), 32), 0.5);
        mask[[0, 0]] = 1.5;
        assert!(matches!(
            apply_erb_mask(&spec, &mask, &fb),
            Err(Error::Contract(_))
        ));
        let _ = StftConfig::REFERENCE;
    }
}
