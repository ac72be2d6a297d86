//! The run configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sela_core::adapt::{AdaptConfig, Method, PretrainConfig, PretrainCorpusSpec};
use sela_core::lora::LoraConfig;
use sela_core::model::ModelDims;
use sela_core::scenes::{
    grid, SceneSizes, SceneSpec, ScheduleMode, REFERENCE_SCENARIOS, REFERENCE_SNR_RANGES,
};
use sela_core::{Error, Result};

/// Overrides `out_dir` when set.
pub const OUT_DIR_ENV: &str = "SELA_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub adapt: AdaptSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub scenarios: Vec<String>,
    /// `[lo, hi]` in dB, one scene per scenario and range.
    pub snr_ranges: Vec<[f64; 2]>,
    pub sizes: SceneSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dims: ModelDims,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub train: PretrainConfig,
    pub corpus: PretrainCorpusSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub methods: Vec<Method>,
    pub modes: Vec<ScheduleMode>,
    /// Seed of the sequential visiting order.
    pub schedule_seed: u64,
    pub session: AdaptConfig,
}

impl RunConfig {
    /// The desk-scale setup: 12 synthetic scenes, 32 bands, 32 hidden units.
    pub fn desk() -> Self {
        Self {
            out_dir: PathBuf::from("runs/desk"),
            corpus: CorpusSection {
                seed: 1,
                scenarios: REFERENCE_SCENARIOS.iter().map(|s| s.to_string()).collect(),
                snr_ranges: REFERENCE_SNR_RANGES.iter().map(|&(a, b)| [a, b]).collect(),
                sizes: SceneSizes::REFERENCE,
            },
            model: ModelSection {
                dims: ModelDims::DESK,
                init_seed: 0,
            },
            pretrain: PretrainSection {
                train: PretrainConfig::reference(20, 50, 0),
                corpus: PretrainCorpusSpec {
                    speakers: (0..8).collect(),
                    utterances: 48,
                    utterance_secs: 4.0,
                    scenarios: vec!["white".into(), "pink".into()],
                    noise_clips: 8,
                    noise_secs: 4.0,
                    seed: 1000,
                },
            },
            adapt: AdaptSection {
                methods: vec![Method::Lora, Method::Remixit],
                modes: vec![ScheduleMode::Isolated, ScheduleMode::Sequential],
                schedule_seed: 1,
                session: AdaptConfig::reference(1),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are TOML-representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.scenarios.is_empty() || self.corpus.snr_ranges.is_empty() {
            return Err(Error::InvalidConfig(
                "corpus needs at least one scenario and one SNR range".into(),
            ));
        }
        for spec in self.scene_specs() {
            spec.validate()?;
        }
        if self.model.dims.bands == 0 || self.model.dims.hidden == 0 {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        self.pretrain.train.validate()?;
        if self.adapt.methods.is_empty() || self.adapt.modes.is_empty() {
            return Err(Error::InvalidConfig(
                "adapt needs at least one method and one mode".into(),
            ));
        }
        self.adapt.session.validate()?;
        self.adapt.session.lora.validate(self.model.dims)
    }

    pub fn scene_specs(&self) -> Vec<SceneSpec> {
        let scenarios: Vec<&str> = self.corpus.scenarios.iter().map(String::as_str).collect();
        let ranges: Vec<(f64, f64)> = self
            .corpus
            .snr_ranges
            .iter()
            .map(|&[a, b]| (a, b))
            .collect();
        grid(&scenarios, &ranges, self.corpus.sizes, self.corpus.seed)
    }

    /// `out_dir`, or the value of [`OUT_DIR_ENV`] if that is set.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out_dir.clone(),
        }
    }
}

/// Parses `16:1,32:1,64:1,1:64` into `(rank, scale)` pairs.
pub fn parse_rank_scale_grid(text: &str) -> Result<Vec<(usize, f64)>> {
    text.split(',')
        .map(|item| {
            let bad = || Error::InvalidConfig(format!("rank:scale entry {item:?}"));
            let (r, s) = item.trim().split_once(':').ok_or_else(bad)?;
            let rank = r.trim().parse().map_err(|_| bad())?;
            let scale = s.trim().parse().map_err(|_| bad())?;
            Ok((rank, scale))
        })
        .collect()
}

/// The adapter config of one ablation point, on the configured targets.
pub fn grid_lora(base: &LoraConfig, rank: usize, scale: f64) -> LoraConfig {
    LoraConfig {
        rank,
        scale,
        targets: base.targets.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_round_trips() {
        let cfg = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.scene_specs().len(), 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::desk().to_toml().replace(
            "[model]\ninit_seed = 0",
            "[model]\ninit_seed = 0\nlayers = 3",
        );
        assert!(text.contains("layers = 3"));
        assert!(matches!(
            RunConfig::from_toml(&text),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn seeds_are_required() {
        let text = RunConfig::desk()
            .to_toml()
            .replace("schedule_seed = 1\n", "");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn rank_scale_grid() {
        assert_eq!(
            parse_rank_scale_grid("16:1, 1:64").unwrap(),
            vec![(16, 1.0), (1, 64.0)]
        );
        assert!(parse_rank_scale_grid("16").is_err());
        assert!(parse_rank_scale_grid("a:1").is_err());
    }
}
