use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};

/// Analysis/synthesis window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// `sin(pi (n + 1/2) / N)`: the square root of a half-sample shifted
    /// Hann window. Its square sums to one at 50% overlap and it has no
    /// zero taps, so every output sample has a non-zero window sum.
    SqrtHann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::SqrtHann => (0..len)
                .map(|n| (std::f64::consts::PI * (n as f64 + 0.5) / len as f64).sin())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::SqrtHann => f.write_str("sqrt-hann"),
            Window::Rectangular => f.write_str("rectangular"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftConfig {
    pub const REFERENCE: StftConfig = StftConfig {
        frame_len: 512,
        hop: 256,
        window: Window::SqrtHann,
    };

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frame count for a signal of `len` samples; the last frame is
    /// zero-padded when the hop grid does not end on the final sample.
    pub fn frames_for(&self, len: usize) -> usize {
        if len <= self.frame_len {
            1
        } else {
            1 + (len - self.frame_len).div_ceil(self.hop)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || !self.frame_len.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "frame length {} must be even and at least 2",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::InvalidConfig(format!(
                "hop {} must be in [1, {}]",
                self.hop, self.frame_len
            )));
        }
        Ok(())
    }
}

/// Frames x bins grid of complex STFT coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Array2<Complex64>,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(data: Array2<Complex64>, config: StftConfig) -> Result<Self> {
        config.validate()?;
        if data.ncols() != config.bins() {
            return Err(Error::shape(
                "spectrogram",
                format!("{} bins, expected {}", data.ncols(), config.bins()),
            ));
        }
        if data.nrows() == 0 {
            return Err(Error::shape("spectrogram", "no frames"));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidInput(
                "spectrogram has non-finite entries".into(),
            ));
        }
        Ok(Self { data, config })
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn magnitudes(&self) -> Array2<f64> {
        self.data.mapv(|c| c.norm())
    }

    /// Length of the overlap-add synthesis of this spectrogram.
    pub fn synthesis_len(&self) -> usize {
        self.config.frame_len + (self.frames() - 1) * self.config.hop
    }
}

/// Planned STFT for one configuration. Cheap to clone and shareable across threads.
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Arc<[f64]>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft")
            .field("config", &self.config)
            .finish()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: config.window.coefficients(config.frame_len).into(),
            forward: planner.plan_fft_forward(config.frame_len),
            inverse: planner.plan_fft_inverse(config.frame_len),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn analyze(&self, wave: &Waveform) -> Result<ComplexSpectrogram> {
        let n = self.config.frame_len;
        let hop = self.config.hop;
        let x = wave.samples();
        if x.len() < n {
            return Err(Error::InvalidInput(format!(
                "waveform of {} samples is shorter than one {n}-sample frame",
                x.len()
            )));
        }
        let frames = self.config.frames_for(x.len());
        let bins = self.config.bins();
        let mut data = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = t * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = x.get(start + i).copied().unwrap_or(0.0);
                *slot = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for (k, v) in buf[..bins].iter().enumerate() {
                data[[t, k]] = *v;
            }
        }
        ComplexSpectrogram::new(data, self.config)
    }

    /// Real inverse DFT of one half-spectrum, scaled by 1/N.
    pub(crate) fn inverse_frame(
        &self,
        half: &[Complex64],
        scratch: &mut [Complex64],
        out: &mut [f64],
    ) {
        let n = self.config.frame_len;
        let bins = self.config.bins();
        debug_assert_eq!(half.len(), bins);
        scratch[..bins].copy_from_slice(half);
        for k in 1..bins - 1 {
            scratch[n - k] = half[k].conj();
        }
        self.inverse.process(scratch);
        let scale = 1.0 / n as f64;
        for (o, v) in out.iter_mut().zip(scratch.iter()) {
            *o = v.re * scale;
        }
    }

    /// Per-sample sum of squared synthesis windows for `frames` frames.
    pub(crate) fn window_sum(&self, frames: usize) -> Result<Vec<f64>> {
        let n = self.config.frame_len;
        let hop = self.config.hop;
        let len = n + (frames - 1) * hop;
        let mut sum = vec![0.0; len];
        for t in 0..frames {
            for i in 0..n {
                sum[t * hop + i] += self.window[i] * self.window[i];
            }
        }
        if let Some(i) = sum.iter().position(|&w| w < 1e-12) {
            return Err(Error::Synthesis(format!(
                "window sum vanishes at sample {i}"
            )));
        }
        Ok(sum)
    }

    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Waveform> {
        if spec.config() != self.config {
            return Err(Error::shape(
                "istft",
                format!(
                    "spectrogram config {:?} differs from {:?}",
                    spec.config(),
                    self.config
                ),
            ));
        }
        let n = self.config.frame_len;
        let hop = self.config.hop;
        let frames = spec.frames();
        let wsum = self.window_sum(frames)?;
        let mut out = vec![0.0; wsum.len()];
        let mut scratch = vec![Complex64::new(0.0, 0.0); n];
        let mut frame = vec![0.0; n];
        let data = spec.data();
        for t in 0..frames {
            let row = data.row(t);
            let half = row.as_slice().expect("standard layout");
            self.inverse_frame(half, &mut scratch, &mut frame);
            for i in 0..n {
                out[t * hop + i] += frame[i] * self.window[i];
            }
        }
        for (o, w) in out.iter_mut().zip(&wsum) {
            *o /= w;
        }
        Waveform::new(out, super::SAMPLE_RATE)
    }

    /// Adjoint of `gain -> synthesize(gain * spec)` at the point `spec`:
    /// maps a gradient on the synthesized samples to a gradient on the
    /// real per-bin gains (frames x bins).
    pub(crate) fn gain_adjoint(
        &self,
        spec: &ComplexSpectrogram,
        grad_wave: &[f64],
    ) -> Result<Array2<f64>> {
        let n = self.config.frame_len;
        let hop = self.config.hop;
        let bins = self.config.bins();
        let frames = spec.frames();
        let wsum = self.window_sum(frames)?;
        let mut grad = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let inv_n = 1.0 / n as f64;
        for t in 0..frames {
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = t * hop + i;
                let g = grad_wave.get(idx).copied().unwrap_or(0.0);
                *slot = Complex64::new(self.window[i] * g / wsum[idx], 0.0);
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                let weight = if k == 0 || k == bins - 1 {
                    inv_n
                } else {
                    2.0 * inv_n
                };
                let y = spec.data[[t, k]];
                grad[[t, k]] = weight * (y * buf[k].conj()).re;
            }
        }
        Ok(grad)
    }
}

/// STFT with the reference square-root Hann window.
pub fn stft(wave: &Waveform, frame_len: usize, hop: usize) -> Result<ComplexSpectrogram> {
    Stft::new(StftConfig {
        frame_len,
        hop,
        window: Window::SqrtHann,
    })?
    .analyze(wave)
}

/// Overlap-add synthesis with window-sum normalization.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    Stft::new(spec.config())?.synthesize(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::from_samples((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn zero_wave_gives_zero_spectrogram() {
        let spec = stft(&Waveform::zeros(1024), 512, 256).unwrap();
        assert_eq!(spec.data().dim(), (3, 257));
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn short_wave_is_rejected() {
        assert!(matches!(
            stft(&Waveform::zeros(100), 512, 256),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn bin_centered_cosine_is_concentrated() {
        let n = 512;
        let bin = 37;
        // DFT of a bin-centred cosine through a rectangular window is two
        // spikes of height N/2 at +-bin and exactly zero elsewhere.
        let samples: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * bin as f64 * i as f64 / n as f64).cos())
            .collect();
        let cfg = StftConfig {
            frame_len: n,
            hop: n,
            window: Window::Rectangular,
        };
        let spec = Stft::new(cfg)
            .unwrap()
            .analyze(&Waveform::from_samples(samples).unwrap())
            .unwrap();
        let mags = spec.magnitudes();
        let peak = mags[[0, bin]];
        assert!((peak - n as f64 / 2.0).abs() < 1e-9);
        for k in 0..spec.bins() {
            if k != bin {
                assert!(mags[[0, k]] / peak <= 1e-10, "bin {k}: {}", mags[[0, k]]);
            }
        }
    }

    #[test]
    fn round_trip_random_noise() {
        let x = random_wave(8000, 3);
        let spec = stft(&x, 512, 256).unwrap();
        assert_eq!(spec.frames(), 1 + (8000usize - 512).div_ceil(256));
        let y = istft(&spec).unwrap();
        assert!(y.len() >= x.len());
        assert!(rel_l2(&y.samples()[..x.len()], x.samples()) <= 1e-6);
    }

    #[test]
    fn linearity() {
        let x = random_wave(3000, 1);
        let y = random_wave(3000, 2);
        let (a, b) = (0.7, -1.9);
        let combo = Waveform::from_samples(
            x.samples()
                .iter()
                .zip(y.samples())
                .map(|(p, q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        let sx = stft(&x, 512, 256).unwrap();
        let sy = stft(&y, 512, 256).unwrap();
        let sc = stft(&combo, 512, 256).unwrap();
        let expected = sx.data().mapv(|c| c * a) + sy.data().mapv(|c| c * b);
        let num: f64 = (sc.data() - &expected).iter().map(|c| c.norm_sqr()).sum();
        let den: f64 = expected.iter().map(|c| c.norm_sqr()).sum();
        assert!((num / den).sqrt() <= 1e-9);
    }

    #[test]
    fn gain_adjoint_matches_inner_product() {
        // <d, S(g)> == <S^T d, g> for the linear synthesis map g -> istft(g * Y).
        let stft = Stft::new(StftConfig::REFERENCE).unwrap();
        let x = random_wave(2000, 9);
        let spec = stft.analyze(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gain =
            Array2::from_shape_fn((spec.frames(), spec.bins()), |_| rng.random_range(0.0..1.0));
        let masked = ComplexSpectrogram::new(
            ndarray::Zip::from(spec.data())
                .and(&gain)
                .map_collect(|c, g| c * *g),
            spec.config(),
        )
        .unwrap();
        let out = stft.synthesize(&masked).unwrap();
        let d: Vec<f64> = (0..out.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let lhs: f64 = d.iter().zip(out.samples()).map(|(a, b)| a * b).sum();
        let adj = stft.gain_adjoint(&spec, &d).unwrap();
        let rhs: f64 = (&adj * &gain).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }

    #[test]
    fn hop_larger_than_frame_is_rejected() {
        let cfg = StftConfig {
            frame_len: 256,
            hop: 300,
            window: Window::SqrtHann,
        };
        assert!(Stft::new(cfg).is_err());
    }
}
