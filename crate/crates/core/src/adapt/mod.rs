//! Supervised pretraining, the self-supervised remix adaptation loop with
//! low-rank adapters or full fine-tuning, and the scene protocol runner.

mod pretrain;
mod protocol;
mod session;

pub use pretrain::{
    pretrain, EpochLog, PretrainConfig, PretrainCorpus, PretrainCorpusSpec, PretrainOutcome,
};
pub use protocol::{
    evaluate_scene, merge_results, run_protocol, stored_parameters, AdaptedState, ProtocolConfig,
    ProtocolResult, SessionLog, UpdateRecord,
};
pub use session::{adapt_scene_lora, adapt_scene_remixit, AdaptSessionResult, Probe};

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::neg_snr_on_tape;
use crate::signal::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Remixit,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Remixit => "remixit",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "remixit" => Ok(Method::Remixit),
            other => Err(Error::Unknown {
                kind: "adaptation method",
                name: other.to_string(),
            }),
        }
    }
}

/// Method label of never-adapted results.
pub const PRETRAINED: &str = "pretrained";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub batch: usize,
    pub updates: usize,
    pub remix_snr_lo: f64,
    pub remix_snr_hi: f64,
    pub segment_secs: f64,
    pub lora: LoraConfig,
    /// Leading test pairs of each scene used for the per-update probe.
    pub probe_pairs: usize,
    pub seed: u64,
}

impl AdaptConfig {
    /// Learning rate 1e-3, 20 updates of 24 two-second segments, remix SNR
    /// in [-5, 5] dB, rank-1 adapters with scale 64.
    pub fn reference(seed: u64) -> Self {
        Self {
            lr: 1e-3,
            batch: 24,
            updates: 20,
            remix_snr_lo: -5.0,
            remix_snr_hi: 5.0,
            segment_secs: 2.0,
            lora: LoraConfig::reference(),
            probe_pairs: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if !(self.remix_snr_lo < self.remix_snr_hi) {
            return Err(Error::InvalidConfig("remix SNR range is empty".into()));
        }
        if !(self.segment_secs > 0.0) {
            return Err(Error::InvalidConfig(
                "segment length must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Two-second segments one session consumes.
    pub fn segment_budget(&self) -> usize {
        self.batch * self.updates
    }
}

/// Mean squared difference over all entries.
pub fn spectral_mse_loss(estimate: &Matrix, target: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let e = tape.constant(estimate.clone())?;
    let t = tape.constant(target.clone())?;
    let l = spectral_mse_on_tape(&mut tape, e, t)?;
    Ok(tape.scalar(l))
}

pub fn spectral_mse_on_tape(tape: &mut Tape, estimate: Var, target: Var) -> Result<Var> {
    let d = tape.sub(estimate, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// `10 log10(|x_tilde - x_hat|^2 + eps) - 10 log10(|x_hat|^2)`: the SNR of
/// `estimate` against `pseudo_target`, negated.
pub fn neg_snr_loss(estimate: &Waveform, pseudo_target: &Waveform) -> Result<f64> {
    if estimate.len() != pseudo_target.len() {
        return Err(Error::shape(
            "neg_snr",
            format!("{} vs {} samples", estimate.len(), pseudo_target.len()),
        ));
    }
    let row =
        |w: &Waveform| Array2::from_shape_vec((1, w.len()), w.samples().to_vec()).expect("row");
    let mut tape = Tape::new();
    let e = tape.constant(row(estimate))?;
    let l = neg_snr_on_tape(&mut tape, e, &row(pseudo_target))?;
    Ok(tape.scalar(l))
}
