//! Corpus export and import: a TOML manifest plus one WAV per clip under
//! `scenes/<m>/{adapt,test}/`, and ingestion of user-supplied recordings.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClipIds, SceneDataset, SceneSizes, SceneSpec, TestPair};
use crate::error::{Error, Result};
use crate::seed::substream;
use crate::signal::wav::{read_wav, write_wav, WavEncoding};
use crate::signal::{fit_length, mix_at_snr, Waveform};

pub const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPair {
    pub id: usize,
    pub snr_db: f64,
    pub clean: String,
    pub noisy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub spec: SceneSpec,
    pub clips: ClipIds,
    pub adapt_noisy: Vec<String>,
    pub adapt_noise: Vec<String>,
    pub test: Vec<ManifestPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub scenes: Vec<ManifestEntry>,
}

impl SceneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SceneManifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!(
                    "manifest version {} (expected {MANIFEST_VERSION})",
                    m.version
                ),
            });
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are TOML-representable")
    }
}

fn clip_path(root: &Path, rel: &str) -> PathBuf {
    root.join(rel)
}

fn write_clip(root: &Path, rel: &str, wave: &Waveform) -> Result<()> {
    let path = clip_path(root, rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_wav(&path, wave, WavEncoding::Float32)
}

/// Writes every scene's clips as 32-bit float WAV plus `manifest.toml`
/// under `root` and returns the manifest.
pub fn export_corpus(scenes: &[SceneDataset], root: &Path) -> Result<SceneManifest> {
    let mut entries = Vec::with_capacity(scenes.len());
    for d in scenes {
        let m = d.spec.index;
        let base = format!("scenes/{m}");
        let mut entry = ManifestEntry {
            spec: d.spec.clone(),
            clips: d.clips.clone(),
            adapt_noisy: Vec::new(),
            adapt_noise: Vec::new(),
            test: Vec::new(),
        };
        for (i, w) in d.adapt_noisy.iter().enumerate() {
            let rel = format!("{base}/adapt/noisy_{i:03}.wav");
            write_clip(root, &rel, w)?;
            entry.adapt_noisy.push(rel);
        }
        for (i, w) in d.adapt_noise.iter().enumerate() {
            let rel = format!("{base}/adapt/noise_{i:03}.wav");
            write_clip(root, &rel, w)?;
            entry.adapt_noise.push(rel);
        }
        for p in &d.test_pairs {
            let clean = format!("{base}/test/clean_{:03}.wav", p.id);
            let noisy = format!("{base}/test/noisy_{:03}.wav", p.id);
            write_clip(root, &clean, &p.clean)?;
            write_clip(root, &noisy, &p.noisy)?;
            entry.test.push(ManifestPair {
                id: p.id,
                snr_db: p.snr_db,
                clean,
                noisy,
            });
        }
        entries.push(entry);
    }
    let manifest = SceneManifest {
        version: MANIFEST_VERSION,
        scenes: entries,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a corpus written by [`export_corpus`].
pub fn load_corpus(root: &Path) -> Result<Vec<SceneDataset>> {
    let manifest = SceneManifest::read(&root.join(MANIFEST_FILE))?;
    manifest
        .scenes
        .iter()
        .map(|e| {
            e.spec.validate()?;
            let read = |rel: &String| read_wav(&clip_path(root, rel));
            Ok(SceneDataset {
                spec: e.spec.clone(),
                adapt_noisy: e.adapt_noisy.iter().map(read).collect::<Result<_>>()?,
                adapt_noise: e.adapt_noise.iter().map(read).collect::<Result<_>>()?,
                test_pairs: e
                    .test
                    .iter()
                    .map(|p| {
                        Ok(TestPair {
                            id: p.id,
                            clean: read(&p.clean)?,
                            noisy: read(&p.noisy)?,
                            snr_db: p.snr_db,
                        })
                    })
                    .collect::<Result<_>>()?,
                clips: e.clips.clone(),
            })
        })
        .collect()
}

/// How recordings from a user directory are turned into scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestLayout {
    pub snr_ranges: Vec<(f64, f64)>,
    pub sizes: SceneSizes,
    pub seed: u64,
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Splits shuffled ids into an adapt pool and a test pool in proportion to
/// the clip counts, keeping at least one id in each.
fn split_pool(
    ids: &mut [u64],
    adapt: usize,
    test: usize,
    rng: &mut impl Rng,
) -> (Vec<u64>, Vec<u64>) {
    ids.shuffle(rng);
    let n = ids.len();
    let n_test = ((n * test) / (adapt + test)).clamp(1, n - 1);
    let test_ids = ids[..n_test].to_vec();
    let adapt_ids = ids[n_test..].to_vec();
    (adapt_ids, test_ids)
}

/// Builds scenes from `dir/speech/*.wav` and `dir/noise/<scenario>/*.wav`:
/// one scene per scenario and SNR range. Within a scene, speech files and
/// noise files are split into disjoint adapt and test pools; clips are
/// cropped or cyclically tiled to the configured durations.
pub fn ingest_wav_dir(dir: &Path, layout: &IngestLayout) -> Result<Vec<SceneDataset>> {
    let speech_files = wav_files(&dir.join("speech"))?;
    if speech_files.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{}: need at least two speech recordings",
            dir.join("speech").display()
        )));
    }
    let speech: Vec<Waveform> = speech_files
        .iter()
        .map(|p| read_wav(p))
        .collect::<Result<_>>()?;
    let noise_root = dir.join("noise");
    let mut scenarios: Vec<PathBuf> = fs::read_dir(&noise_root)
        .map_err(|e| Error::io(&noise_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    scenarios.sort();
    if scenarios.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no noise scenarios",
            noise_root.display()
        )));
    }
    let sizes = layout.sizes;
    let mut scenes = Vec::new();
    for sc_dir in &scenarios {
        let name = sc_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let noise_files = wav_files(sc_dir)?;
        if noise_files.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "{}: need at least two noise recordings",
                sc_dir.display()
            )));
        }
        let noise: Vec<Waveform> = noise_files
            .iter()
            .map(|p| read_wav(p))
            .collect::<Result<_>>()?;
        for &(lo, hi) in &layout.snr_ranges {
            let index = scenes.len();
            let spec = SceneSpec {
                index,
                scenario: name.clone(),
                snr_lo: lo,
                snr_hi: hi,
                speakers: Vec::new(),
                seed: layout.seed,
                sizes,
            };
            spec.validate()?;
            let mut rng = substream(layout.seed, "ingest", &[index as u64]);
            let mut speech_ids: Vec<u64> = (0..speech.len() as u64).collect();
            let (sp_adapt, sp_test) = split_pool(
                &mut speech_ids,
                sizes.adapt_clips,
                sizes.test_pairs,
                &mut rng,
            );
            let mut noise_ids: Vec<u64> = (0..noise.len() as u64).collect();
            let (nz_adapt, nz_test) = split_pool(
                &mut noise_ids,
                sizes.adapt_clips + sizes.noise_clips,
                sizes.test_pairs,
                &mut rng,
            );
            let clip = |w: &Waveform, secs: f64| -> Result<Waveform> {
                let n = (secs * f64::from(w.sample_rate())).round() as usize;
                Waveform::new(fit_length(w.samples(), n), w.sample_rate())
            };
            let mut clips = ClipIds::default();
            let mut adapt_noisy = Vec::new();
            for i in 0..sizes.adapt_clips {
                let s_id = sp_adapt[i % sp_adapt.len()];
                let n_id = nz_adapt[i % nz_adapt.len()];
                let snr = rng.random_range(lo..hi);
                let (mix, _) = mix_at_snr(
                    &clip(&speech[s_id as usize], sizes.adapt_secs)?,
                    &clip(&noise[n_id as usize], sizes.adapt_secs)?,
                    snr,
                )?;
                adapt_noisy.push(mix);
                clips.adapt_speech.push(s_id);
                clips.adapt_mix_noise.push(n_id);
            }
            let mut adapt_noise = Vec::new();
            for j in 0..sizes.noise_clips {
                let n_id = nz_adapt[(sizes.adapt_clips + j) % nz_adapt.len()];
                adapt_noise.push(clip(&noise[n_id as usize], sizes.adapt_secs)?);
                clips.adapt_noise.push(n_id);
            }
            let mut test_pairs = Vec::new();
            for p in 0..sizes.test_pairs {
                let s_id = sp_test[p % sp_test.len()];
                let n_id = nz_test[p % nz_test.len()];
                let clean = clip(&speech[s_id as usize], sizes.test_secs)?;
                let snr = rng.random_range(lo..hi);
                let (noisy, _) =
                    mix_at_snr(&clean, &clip(&noise[n_id as usize], sizes.test_secs)?, snr)?;
                test_pairs.push(TestPair {
                    id: p,
                    clean,
                    noisy,
                    snr_db: snr,
                });
                clips.test_speech.push(s_id);
                clips.test_noise.push(n_id);
            }
            scenes.push(SceneDataset {
                spec,
                adapt_noisy,
                adapt_noise,
                test_pairs,
                clips,
            });
        }
    }
    Ok(scenes)
}
