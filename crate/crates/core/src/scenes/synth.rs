//! Synthetic speech and noise generators standing in for recorded corpora.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::seed::substream;
use crate::signal::{Waveform, SAMPLE_RATE};

const SR: f64 = SAMPLE_RATE as f64;
const MIN_SPEECH_SECS: f64 = 0.5;

/// Vowel targets (F1, F2, F3) in Hz for a reference vocal tract.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];
const FORMANT_BW: [f64; 3] = [60.0, 90.0, 120.0];

const PITCHES: [f64; 8] = [100.0, 210.0, 125.0, 180.0, 150.0, 240.0, 112.0, 165.0];
const TRACT_SCALES: [f64; 8] = [0.88, 1.15, 1.02, 0.93, 1.10, 1.00, 1.20, 0.85];

#[derive(Debug, Clone, Copy)]
struct Voice {
    f0: f64,
    tract: f64,
}

fn voice(speaker: u32) -> Voice {
    let slot = (speaker % 8) as usize;
    let cycle = f64::from(speaker / 8);
    Voice {
        f0: PITCHES[slot] * (1.0 + 0.03 * (cycle % 4.0)),
        tract: TRACT_SCALES[slot],
    }
}

fn samples_for(duration: f64) -> Result<usize> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::InvalidInput(format!("duration {duration} s")));
    }
    Ok((duration * SR).round() as usize)
}

/// Two-pole resonator normalized to unit gain at DC.
struct Resonator {
    a1: f64,
    a2: f64,
    g: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64) -> Self {
        let r = (-PI * bw / SR).exp();
        let theta = 2.0 * PI * freq.min(0.45 * SR) / SR;
        let a1 = 2.0 * r * theta.cos();
        let a2 = -r * r;
        Self {
            a1,
            a2,
            g: 1.0 - a1 - a2,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bw: f64) {
        let fresh = Self::new(freq, bw);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.g = fresh.g;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.g * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Speech-like signal: voiced syllables from a pulse source through three
/// formant resonators, unvoiced bursts, and pauses between words. The first
/// 80 to 200 ms are silent. Peak amplitude is at most 0.9.
pub fn synth_speech(speaker: u32, duration: f64, seed: u64) -> Result<Waveform> {
    if duration < MIN_SPEECH_SECS {
        return Err(Error::InvalidInput(format!(
            "speech duration {duration} s is below {MIN_SPEECH_SECS} s"
        )));
    }
    let n = samples_for(duration)?;
    let v = voice(speaker);
    let mut rng = substream(seed, "speech", &[u64::from(speaker)]);
    let mut voiced = vec![0.0; n];
    let mut unvoiced = vec![0.0; n];
    let mut track = Vec::new();

    let mut pos = (rng.random_range(0.08..0.2) * SR) as usize;
    while pos < n {
        let syllables = rng.random_range(1..=3);
        for _ in 0..syllables {
            if pos >= n {
                break;
            }
            if rng.random_bool(0.35) {
                let len = (rng.random_range(0.03..0.09) * SR) as usize;
                let amp = rng.random_range(0.05..0.15);
                let mut prev = 0.0;
                for i in pos..(pos + len).min(n) {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    let ramp = envelope(i - pos, len, 0.1);
                    unvoiced[i] = amp * ramp * (w - prev);
                    prev = w;
                }
                pos += len;
            }
            let len = (rng.random_range(0.10..0.28) * SR) as usize;
            let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
            let drift = rng.random_range(-0.12..0.12);
            let vibrato = rng.random_range(2.0..6.0);
            let level = rng.random_range(0.6..1.0);
            let mut phase = 0.0;
            for i in pos..(pos + len).min(n) {
                let t = (i - pos) as f64 / len as f64;
                let f0 = v.f0 * (1.0 + drift * t + 0.02 * (2.0 * PI * vibrato * t).sin());
                phase += f0 / SR;
                if phase >= 1.0 {
                    phase -= 1.0;
                    voiced[i] += level * envelope(i - pos, len, 0.15);
                }
            }
            track.push((pos, (pos + len).min(n), vowel));
            pos += len + (rng.random_range(0.0..0.04) * SR) as usize;
        }
        pos += (rng.random_range(0.12..0.35) * SR) as usize;
    }

    let shaped = formant_filter(&voiced, &track, v.tract);
    let mut out: Vec<f64> = shaped.iter().zip(&unvoiced).map(|(a, b)| a + b).collect();
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let target = rng.random_range(0.5..0.85);
        out.iter_mut().for_each(|x| *x *= target / peak);
    }
    Waveform::from_samples(out)
}

fn envelope(i: usize, len: usize, ramp_frac: f64) -> f64 {
    let ramp = ((len as f64) * ramp_frac).max(1.0);
    let i = i as f64;
    let up = (i / ramp).min(1.0);
    let down = (((len as f64) - i) / ramp).min(1.0);
    let x = up.min(down).max(0.0);
    0.5 - 0.5 * (PI * x).cos()
}

/// Source through a cascade of three formant resonators that retune at
/// each syllable onset.
fn formant_filter(source: &[f64], track: &[(usize, usize, [f64; 3])], tract: f64) -> Vec<f64> {
    let mut res: Vec<Resonator> = (0..3)
        .map(|k| Resonator::new(VOWELS[0][k] * tract, FORMANT_BW[k]))
        .collect();
    let mut glottal = 0.0;
    let mut out = vec![0.0; source.len()];
    let mut seg = 0;
    for (i, &x) in source.iter().enumerate() {
        while seg < track.len() && i >= track[seg].1 {
            seg += 1;
        }
        if seg < track.len() && i == track[seg].0 {
            for (k, r) in res.iter_mut().enumerate() {
                r.retune(track[seg].2[k] * tract, FORMANT_BW[k]);
            }
        }
        glottal = 0.9 * glottal + x;
        let mut y = glottal;
        for r in res.iter_mut() {
            y = r.tick(y);
        }
        out[i] = y;
    }
    out
}

/// Registered noise generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
    Hum,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        NoiseKind::White,
        NoiseKind::Pink,
        NoiseKind::Babble,
        NoiseKind::Hum,
    ];

    fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
            NoiseKind::Hum => "hum",
        }
    }
}

/// A noise scenario: a generator family plus a variant number fixing its
/// long-term character (hum fundamental, babble modulation rates). Clip
/// seeds then pick individual recordings from the same "location".
/// Written as `kind` or `kind-variant`, e.g. `hum-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NoiseScenario {
    pub kind: NoiseKind,
    pub variant: u32,
}

impl FromStr for NoiseScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::Unknown {
            kind: "noise scenario",
            name: s.to_string(),
        };
        let (name, variant) = match s.split_once('-') {
            Some((n, v)) => (n, v.parse::<u32>().map_err(|_| unknown())?),
            None => (s, 0),
        };
        let kind = NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(unknown)?;
        Ok(Self { kind, variant })
    }
}

impl fmt::Display for NoiseScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.variant == 0 {
            f.write_str(self.kind.name())
        } else {
            write!(f, "{}-{}", self.kind.name(), self.variant)
        }
    }
}

/// One noise clip of `duration` seconds from `scenario`, scaled to RMS 0.1.
pub fn synth_noise(scenario: &str, duration: f64, seed: u64) -> Result<Waveform> {
    let sc: NoiseScenario = scenario.parse()?;
    let n = samples_for(duration)?;
    let mut rng = substream(seed, "noise", &[sc.kind as u64, u64::from(sc.variant)]);
    let mut x = match sc.kind {
        NoiseKind::White => gaussian(&mut rng, n),
        NoiseKind::Pink => shaped(&mut rng, n, |f| 1.0 / f.max(20.0).sqrt()),
        NoiseKind::Babble => babble(&mut rng, n, sc.variant),
        NoiseKind::Hum => hum(&mut rng, n, sc.variant),
    };
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.1 / rms);
    }
    Waveform::from_samples(x)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gaussian noise with amplitude response `gain(f_hz)`, shaped over the
/// whole clip in the frequency domain.
fn shaped(rng: &mut ChaCha8Rng, n: usize, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = gaussian(rng, n)
        .into_iter()
        .map(|v| Complex64::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *c *= gain(bin as f64 * SR / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

/// Speech-shaped noise under a slow syllabic amplitude modulation.
fn babble(rng: &mut ChaCha8Rng, n: usize, variant: u32) -> Vec<f64> {
    let centers = [500.0, 1500.0, 2600.0];
    let base = shaped(rng, n, |f| {
        let bumps: f64 = centers
            .iter()
            .map(|c| 1.0 / (1.0 + ((f - c) / 400.0).powi(2)))
            .sum();
        (0.15 + bumps) / (1.0 + f / 4000.0)
    });
    let rates = [
        2.1 + 0.37 * f64::from(variant % 5),
        3.9,
        5.7 - 0.29 * f64::from(variant % 3),
    ];
    let phases: Vec<f64> = rates
        .iter()
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    base.iter()
        .enumerate()
        .map(|(i, v)| {
            let t = i as f64 / SR;
            let m: f64 = rates
                .iter()
                .zip(&phases)
                .map(|(r, p)| (2.0 * PI * r * t + p).sin())
                .sum::<f64>()
                / 3.0;
            v * (1.0 + 0.8 * m).max(0.1)
        })
        .collect()
}

/// Mains hum with harmonics plus a broadband floor 20 dB down.
fn hum(rng: &mut ChaCha8Rng, n: usize, variant: u32) -> Vec<f64> {
    let f0 = [50.0, 60.0][(variant % 2) as usize] * (1.0 + f64::from(variant / 2));
    let harmonics: Vec<(f64, f64)> = (1..=12)
        .map(|k| (f64::from(k) * f0, rng.random_range(0.0..2.0 * PI)))
        .filter(|(f, _)| *f < 0.45 * SR)
        .collect();
    let wobble = rng.random_range(0.0..2.0 * PI);
    let tones: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / SR;
            let s: f64 = harmonics
                .iter()
                .enumerate()
                .map(|(k, (f, p))| (2.0 * PI * f * t + p).sin() / (k + 1) as f64)
                .sum();
            s * (1.0 + 0.1 * (2.0 * PI * 0.5 * t + wobble).sin())
        })
        .collect();
    let tone_rms = (tones.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let floor = gaussian(rng, n);
    tones
        .iter()
        .zip(floor)
        .map(|(t, w)| t + 0.1 * tone_rms * w)
        .collect()
}
