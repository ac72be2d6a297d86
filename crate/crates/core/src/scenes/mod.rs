//! Acoustic scenes: synthetic corpus generation, per-scene adapt/test
//! datasets with disjoint material, and isolated or sequential schedules.

mod store;
mod synth;

pub use store::{
    export_corpus, ingest_wav_dir, load_corpus, IngestLayout, ManifestEntry, SceneManifest,
    MANIFEST_FILE,
};
pub use synth::{synth_noise, synth_speech, NoiseKind, NoiseScenario};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, substream};
use crate::signal::{mix_at_snr, Waveform};

/// SNR ranges of the reference protocol: very noisy, moderately noisy and
/// relatively quiet.
pub const REFERENCE_SNR_RANGES: [(f64, f64); 3] = [(-8.0, 0.0), (0.0, 5.0), (5.0, 10.0)];
pub const REFERENCE_SCENARIOS: [&str; 4] = ["white", "pink", "babble", "hum"];

/// Clip counts and durations for one scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSizes {
    /// Noisy-only adaptation utterances.
    pub adapt_clips: usize,
    /// Raw noise segments reserved for remixing.
    pub noise_clips: usize,
    pub test_pairs: usize,
    pub adapt_secs: f64,
    pub test_secs: f64,
}

impl SceneSizes {
    pub const REFERENCE: SceneSizes = SceneSizes {
        adapt_clips: 24,
        noise_clips: 12,
        test_pairs: 20,
        adapt_secs: 4.0,
        test_secs: 3.0,
    };

    fn validate(&self) -> Result<()> {
        if self.adapt_clips == 0 || self.noise_clips == 0 || self.test_pairs == 0 {
            return Err(Error::InvalidConfig(
                "scene clip counts must be positive".into(),
            ));
        }
        if !(self.adapt_secs >= 0.5 && self.test_secs >= 0.5) {
            return Err(Error::InvalidConfig(
                "scene clips must last at least 0.5 s".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SceneSizes {
    fn default() -> Self {
        Self::REFERENCE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub index: usize,
    pub scenario: String,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub speakers: Vec<u32>,
    pub seed: u64,
    #[serde(default)]
    pub sizes: SceneSizes,
}

impl SceneSpec {
    pub fn snr_range(&self) -> (f64, f64) {
        (self.snr_lo, self.snr_hi)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.snr_lo.is_finite() && self.snr_hi.is_finite() && self.snr_lo < self.snr_hi) {
            return Err(Error::InvalidConfig(format!(
                "scene {}: SNR range [{}, {}] is empty",
                self.index, self.snr_lo, self.snr_hi
            )));
        }
        self.sizes.validate()
    }

    /// Synthetic scenes additionally need 2 to 5 speakers.
    fn validate_synthetic(&self) -> Result<()> {
        self.validate()?;
        if !(2..=5).contains(&self.speakers.len()) {
            return Err(Error::InvalidConfig(format!(
                "scene {}: {} speakers, expected 2 to 5",
                self.index,
                self.speakers.len()
            )));
        }
        Ok(())
    }
}

/// Twelve scenes: every reference scenario at every reference SNR range,
/// each with three speakers.
pub fn reference_grid(seed: u64) -> Vec<SceneSpec> {
    grid(
        &REFERENCE_SCENARIOS,
        &REFERENCE_SNR_RANGES,
        SceneSizes::REFERENCE,
        seed,
    )
}

pub fn grid(
    scenarios: &[&str],
    ranges: &[(f64, f64)],
    sizes: SceneSizes,
    seed: u64,
) -> Vec<SceneSpec> {
    let mut specs = Vec::new();
    for scenario in scenarios {
        for &(lo, hi) in ranges {
            let index = specs.len();
            let mut rng = substream(seed, "scene-speakers", &[index as u64]);
            let mut pool: Vec<u32> = (0..8).collect();
            pool.shuffle(&mut rng);
            specs.push(SceneSpec {
                index,
                scenario: scenario.to_string(),
                snr_lo: lo,
                snr_hi: hi,
                speakers: pool[..3].to_vec(),
                seed: derive_seed(seed, "scene", &[index as u64]),
                sizes,
            });
        }
    }
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestPair {
    pub id: usize,
    pub clean: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
}

/// Provenance of every clip, used to check the adapt/test split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipIds {
    pub adapt_speech: Vec<u64>,
    pub adapt_mix_noise: Vec<u64>,
    pub adapt_noise: Vec<u64>,
    pub test_speech: Vec<u64>,
    pub test_noise: Vec<u64>,
}

impl ClipIds {
    pub fn is_disjoint(&self) -> bool {
        let adapt_noise: std::collections::BTreeSet<u64> = self
            .adapt_mix_noise
            .iter()
            .chain(&self.adapt_noise)
            .copied()
            .collect();
        let adapt_speech: std::collections::BTreeSet<u64> =
            self.adapt_speech.iter().copied().collect();
        self.test_noise.iter().all(|id| !adapt_noise.contains(id))
            && self.test_speech.iter().all(|id| !adapt_speech.contains(id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub spec: SceneSpec,
    pub adapt_noisy: Vec<Waveform>,
    pub adapt_noise: Vec<Waveform>,
    pub test_pairs: Vec<TestPair>,
    pub clips: ClipIds,
}

/// Builds a scene from synthetic material. Speech utterances and noise clips
/// are numbered per scene; adapt material takes the low ids, test material
/// the high ones, so the two splits never share a clip.
pub fn build_scene(spec: &SceneSpec) -> Result<SceneDataset> {
    spec.validate_synthetic()?;
    let sizes = spec.sizes;
    let speech = |id: usize, secs: f64| -> Result<Waveform> {
        let speaker = spec.speakers[id % spec.speakers.len()];
        synth_speech(
            speaker,
            secs,
            derive_seed(spec.seed, "utterance", &[id as u64]),
        )
    };
    let noise = |id: usize, secs: f64| -> Result<Waveform> {
        synth_noise(
            &spec.scenario,
            secs,
            derive_seed(spec.seed, "noise-clip", &[id as u64]),
        )
    };
    let mut snr_rng = substream(spec.seed, "scene-snr", &[]);
    let mut clips = ClipIds::default();

    let mut adapt_noisy = Vec::with_capacity(sizes.adapt_clips);
    for i in 0..sizes.adapt_clips {
        let snr = snr_rng.random_range(spec.snr_lo..spec.snr_hi);
        let (mix, _) = mix_at_snr(
            &speech(i, sizes.adapt_secs)?,
            &noise(i, sizes.adapt_secs)?,
            snr,
        )?;
        adapt_noisy.push(mix);
        clips.adapt_speech.push(i as u64);
        clips.adapt_mix_noise.push(i as u64);
    }
    let mut adapt_noise = Vec::with_capacity(sizes.noise_clips);
    for j in 0..sizes.noise_clips {
        let id = sizes.adapt_clips + j;
        adapt_noise.push(noise(id, sizes.adapt_secs)?);
        clips.adapt_noise.push(id as u64);
    }
    let noise_base = sizes.adapt_clips + sizes.noise_clips;
    let mut test_pairs = Vec::with_capacity(sizes.test_pairs);
    for p in 0..sizes.test_pairs {
        let speech_id = sizes.adapt_clips + p;
        let noise_id = noise_base + p;
        let clean = speech(speech_id, sizes.test_secs)?;
        let snr = snr_rng.random_range(spec.snr_lo..spec.snr_hi);
        let (noisy, _) = mix_at_snr(&clean, &noise(noise_id, sizes.test_secs)?, snr)?;
        test_pairs.push(TestPair {
            id: p,
            clean,
            noisy,
            snr_db: snr,
        });
        clips.test_speech.push(speech_id as u64);
        clips.test_noise.push(noise_id as u64);
    }
    Ok(SceneDataset {
        spec: spec.clone(),
        adapt_noisy,
        adapt_noise,
        test_pairs,
        clips,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Isolated,
    Sequential,
}

impl ScheduleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleMode::Isolated => "isolated",
            ScheduleMode::Sequential => "sequential",
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isolated" => Ok(ScheduleMode::Isolated),
            "sequential" => Ok(ScheduleMode::Sequential),
            other => Err(Error::Unknown {
                kind: "schedule mode",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSchedule {
    pub mode: ScheduleMode,
    pub seed: u64,
    /// Scene indices in visiting order.
    pub order: Vec<usize>,
}

/// Isolated schedules keep index order; sequential schedules are one
/// shuffled pass over all scenes.
pub fn sequence_scenes(
    specs: &[SceneSpec],
    mode: ScheduleMode,
    seed: u64,
) -> Result<SceneSchedule> {
    if specs.is_empty() {
        return Err(Error::InvalidInput(
            "a schedule needs at least one scene".into(),
        ));
    }
    let mut order: Vec<usize> = specs.iter().map(|s| s.index).collect();
    order.sort_unstable();
    if order.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidInput(
            "duplicate scene index in schedule".into(),
        ));
    }
    if mode == ScheduleMode::Sequential {
        order.shuffle(&mut substream(seed, "schedule", &[]));
    }
    Ok(SceneSchedule { mode, seed, order })
}
