use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adam, Tape};
use crate::error::{Error, Result};
use crate::model::{FrontEnd, GruEnhancerParams, ModelCheckpoint};
use crate::scenes::{synth_noise, synth_speech};
use crate::seed::{derive_seed, substream};
use crate::signal::{mix_at_snr, Waveform, POWER_FLOOR, SAMPLE_RATE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    /// Learning-rate multiplier applied after `patience` epochs without a
    /// lower epoch-mean loss.
    pub decay: f64,
    pub patience: usize,
    pub batch: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub snr_lo: f64,
    pub snr_hi: f64,
    pub segment_secs: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn reference(epochs: usize, steps_per_epoch: usize, seed: u64) -> Self {
        Self {
            lr: 1e-3,
            decay: 0.1,
            patience: 2,
            batch: 8,
            epochs,
            steps_per_epoch,
            snr_lo: -5.0,
            snr_hi: 20.0,
            segment_secs: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "batch, epochs and steps must be at least 1".into(),
            ));
        }
        if !(self.snr_lo < self.snr_hi) {
            return Err(Error::InvalidConfig(
                "pretraining SNR range is empty".into(),
            ));
        }
        Ok(())
    }

    /// Short digest of the configuration, stored in checkpoints.
    pub fn digest(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let d = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Synthetic pretraining material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainCorpusSpec {
    pub speakers: Vec<u32>,
    pub utterances: usize,
    pub utterance_secs: f64,
    pub scenarios: Vec<String>,
    pub noise_clips: usize,
    pub noise_secs: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainCorpus {
    pub speech: Vec<Waveform>,
    pub noise: Vec<Waveform>,
}

impl PretrainCorpus {
    pub fn synthesize(spec: &PretrainCorpusSpec) -> Result<Self> {
        if spec.speakers.is_empty() || spec.scenarios.is_empty() {
            return Err(Error::InvalidConfig(
                "pretraining corpus needs speakers and scenarios".into(),
            ));
        }
        let speech = (0..spec.utterances)
            .map(|i| {
                let speaker = spec.speakers[i % spec.speakers.len()];
                synth_speech(
                    speaker,
                    spec.utterance_secs,
                    derive_seed(spec.seed, "pretrain-speech", &[i as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let mut noise = Vec::new();
        for (s, scenario) in spec.scenarios.iter().enumerate() {
            for c in 0..spec.noise_clips {
                let seed = derive_seed(spec.seed, "pretrain-noise", &[s as u64, c as u64]);
                noise.push(synth_noise(scenario, spec.noise_secs, seed)?);
            }
        }
        Ok(Self { speech, noise })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters at the lowest epoch-mean loss.
    pub best: GruEnhancerParams,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub checkpoint: ModelCheckpoint,
}

/// A random crop of `len` samples, or the whole clip tiled if shorter.
pub(crate) fn random_crop(wave: &Waveform, len: usize, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    if wave.len() <= len {
        return Waveform::new(
            crate::signal::fit_length(wave.samples(), len),
            wave.sample_rate(),
        );
    }
    let start = rng.random_range(0..=wave.len() - len);
    wave.segment(start, len)
}

fn sample_pair(
    corpus: &PretrainCorpus,
    cfg: &PretrainConfig,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Waveform, Waveform)> {
    for _ in 0..100 {
        let clean = random_crop(
            &corpus.speech[rng.random_range(0..corpus.speech.len())],
            len,
            rng,
        )?;
        let noise = random_crop(
            &corpus.noise[rng.random_range(0..corpus.noise.len())],
            len,
            rng,
        )?;
        let snr = rng.random_range(cfg.snr_lo..cfg.snr_hi);
        if clean.power() < POWER_FLOOR {
            continue;
        }
        let (noisy, _) = mix_at_snr(&clean, &noise, snr)?;
        return Ok((clean, noisy));
    }
    Err(Error::InvalidInput(
        "speech corpus yields only silent segments".into(),
    ))
}

/// Supervised training on mixtures drawn on the fly: the loss is the MSE
/// between the compressed ERB features of the masked mixture and of the
/// clean speech. After `patience` epochs without a new lowest epoch-mean
/// loss the learning rate is multiplied by `decay`. `on_epoch` sees every
/// epoch summary as it completes.
pub fn pretrain(
    init: GruEnhancerParams,
    corpus: &PretrainCorpus,
    cfg: &PretrainConfig,
    front: &FrontEnd,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.speech.is_empty() || corpus.noise.is_empty() {
        return Err(Error::InvalidInput("pretraining corpus is empty".into()));
    }
    let len = (cfg.segment_secs * f64::from(SAMPLE_RATE)).round() as usize;
    let mut params = init;
    params.set_trainable(true);
    let mut adam = Adam::new(cfg.lr);
    let mut rng = substream(cfg.seed, "pretrain", &[]);
    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut stale = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let global = epoch * cfg.steps_per_epoch + step;
            let mut noisy = Vec::with_capacity(cfg.batch);
            let mut targets = Vec::with_capacity(cfg.batch);
            for _ in 0..cfg.batch {
                let (clean, mix) = sample_pair(corpus, cfg, len, &mut rng)?;
                targets.push(front.analyze(&clean)?.features);
                noisy.push(front.analyze(&mix)?);
            }
            let mut tape = Tape::new();
            let diverged = |e: Error| match e {
                Error::Numeric { op, detail } => Error::Divergence {
                    step: global,
                    detail: format!("{op}: {detail}"),
                },
                other => other,
            };
            let loss = front
                .feature_mse_on_tape(&mut tape, &params, None, &noisy, &targets)
                .map_err(diverged)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: global,
                    detail: format!("loss {value}"),
                });
            }
            let grads = tape.backward(loss).map_err(diverged)?;
            params.params_mut().accumulate(&grads)?;
            adam.step(params.params_mut())?;
            total += value;
        }
        let mean_loss = total / cfg.steps_per_epoch as f64;
        let log = EpochLog {
            epoch,
            mean_loss,
            lr: adam.lr(),
        };
        on_epoch(&log);
        epochs.push(log);
        if mean_loss < best.0 {
            best = (mean_loss, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                adam.set_lr(adam.lr() * cfg.decay);
                stale = 0;
            }
        }
    }
    let (_, mut best_params, best_epoch) = best;
    best_params.set_trainable(false);
    best_params.params_mut().zero_grad();
    let checkpoint = ModelCheckpoint::save(&best_params, cfg.digest());
    Ok(PretrainOutcome {
        best: best_params,
        best_epoch,
        epochs,
        checkpoint,
    })
}
