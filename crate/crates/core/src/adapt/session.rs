use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::pretrain::random_crop;
use super::AdaptConfig;
use crate::autodiff::{Adam, Matrix, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::lora::{merge, AdapterSet};
use crate::metrics::snr_db;
use crate::model::{neg_snr_on_tape, FrontEnd, GruEnhancerParams};
use crate::scenes::SceneDataset;
use crate::signal::{mix_at_snr, Waveform, POWER_FLOOR, SAMPLE_RATE};

use super::Method;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSessionResult {
    pub scene: usize,
    pub method: Method,
    pub losses: Vec<f64>,
    /// Mean probe delta-SNR after each update.
    pub probe_delta_snr: Vec<f64>,
    /// Wall time of each update in milliseconds.
    pub wall_ms: Vec<f64>,
    /// Fingerprint of the adapted state (adapters or full student).
    pub state_fingerprint: String,
    pub segments_used: usize,
    pub trainable: usize,
}

/// The first test pairs of a scene and the pretrained model's SNR on them.
#[derive(Debug, Clone)]
pub struct Probe {
    noisy: Vec<Waveform>,
    clean: Vec<Waveform>,
    baseline_snr: Vec<f64>,
}

impl Probe {
    pub fn new(
        front: &FrontEnd,
        base: &GruEnhancerParams,
        scene: &SceneDataset,
        pairs: usize,
    ) -> Result<Self> {
        let chosen = &scene.test_pairs[..pairs.min(scene.test_pairs.len())];
        let noisy: Vec<Waveform> = chosen.iter().map(|p| p.noisy.clone()).collect();
        let clean: Vec<Waveform> = chosen.iter().map(|p| p.clean.clone()).collect();
        let out = front.enhance_batch(&noisy, base, None)?;
        let baseline_snr = out
            .iter()
            .zip(&clean)
            .map(|(o, c)| snr_db(o.samples(), c.samples()))
            .collect::<Result<_>>()?;
        Ok(Self {
            noisy,
            clean,
            baseline_snr,
        })
    }

    /// Mean SNR gain of `params` over the pretrained model.
    pub fn delta_snr(&self, front: &FrontEnd, params: &GruEnhancerParams) -> Result<f64> {
        if self.noisy.is_empty() {
            return Ok(0.0);
        }
        let out = front.enhance_batch(&self.noisy, params, None)?;
        let mut total = 0.0;
        for ((o, c), base) in out.iter().zip(&self.clean).zip(&self.baseline_snr) {
            total += snr_db(o.samples(), c.samples())? - base;
        }
        Ok(total / self.noisy.len() as f64)
    }
}

enum Student<'a> {
    Lora {
        base: &'a GruEnhancerParams,
        adapters: &'a mut AdapterSet,
    },
    Full {
        params: &'a mut GruEnhancerParams,
    },
}

impl Student<'_> {
    fn trainable(&mut self) -> &mut ParamSet {
        match self {
            Student::Lora { adapters, .. } => adapters.params_mut(),
            Student::Full { params } => params.params_mut(),
        }
    }

    fn evaluation_params(&self) -> Result<GruEnhancerParams> {
        match self {
            Student::Lora { base, adapters } => merge(base, adapters),
            Student::Full { params } => Ok((*params).clone()),
        }
    }

    fn fingerprint(&self) -> String {
        match self {
            Student::Lora { adapters, .. } => adapters.fingerprint(),
            Student::Full { params } => params.fingerprint(),
        }
    }
}

fn as_rows(waves: &[Waveform]) -> Matrix {
    let len = waves[0].len();
    Array2::from_shape_fn((waves.len(), len), |(b, n)| waves[b].samples()[n])
}

/// The remix loop shared by both methods. Per update: crop noisy adapt
/// clips, take the teacher's enhancement as pseudo-target, add a reserved
/// noise segment at a random SNR, and step the student on the negative SNR
/// of its output against the pseudo-target.
#[allow(clippy::too_many_arguments)]
fn remix_session(
    method: Method,
    front: &FrontEnd,
    teacher: &GruEnhancerParams,
    mut student: Student<'_>,
    scene: &SceneDataset,
    cfg: &AdaptConfig,
    probe: &Probe,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptSessionResult> {
    cfg.validate()?;
    if scene.adapt_noisy.is_empty() || scene.adapt_noise.is_empty() {
        return Err(Error::InvalidInput(format!(
            "scene {} has no adaptation material",
            scene.spec.index
        )));
    }
    let len = (cfg.segment_secs * f64::from(SAMPLE_RATE)).round() as usize;
    let mut adam = Adam::new(cfg.lr);
    let trainable = student.trainable().trainable_count();
    let mut result = AdaptSessionResult {
        scene: scene.spec.index,
        method,
        losses: Vec::with_capacity(cfg.updates),
        probe_delta_snr: Vec::with_capacity(cfg.updates),
        wall_ms: Vec::with_capacity(cfg.updates),
        state_fingerprint: String::new(),
        segments_used: 0,
        trainable,
    };
    for update in 0..cfg.updates {
        let started = Instant::now();
        let at_step = |e: Error| match e {
            Error::Numeric { op, detail } => Error::Divergence {
                step: update,
                detail: format!("scene {}: {op}: {detail}", scene.spec.index),
            },
            other => other,
        };
        let crops = (0..cfg.batch)
            .map(|_| {
                random_crop(
                    &scene.adapt_noisy[rng.random_range(0..scene.adapt_noisy.len())],
                    len,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pseudo = front.enhance_batch(&crops, teacher, None)?;
        let mut remixed = Vec::with_capacity(cfg.batch);
        for target in &pseudo {
            if target.power() < POWER_FLOOR {
                return Err(Error::InvalidInput(format!(
                    "scene {}: silent pseudo-target at update {update}",
                    scene.spec.index
                )));
            }
            let noise = random_crop(
                &scene.adapt_noise[rng.random_range(0..scene.adapt_noise.len())],
                len,
                rng,
            )?;
            let snr = rng.random_range(cfg.remix_snr_lo..cfg.remix_snr_hi);
            remixed.push(front.analyze(&mix_at_snr(target, &noise, snr)?.0)?);
        }
        result.segments_used += cfg.batch;

        let mut tape = Tape::new();
        let out = match &student {
            Student::Lora { base, adapters } => {
                front.enhance_on_tape(&mut tape, base, Some(adapters), &remixed)
            }
            Student::Full { params } => front.enhance_on_tape(&mut tape, params, None, &remixed),
        }
        .map_err(at_step)?;
        let loss = neg_snr_on_tape(&mut tape, out, &as_rows(&pseudo)).map_err(at_step)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss).map_err(at_step)?;
        let set = student.trainable();
        set.accumulate(&grads)?;
        adam.step(set)?;
        if set.iter().any(|p| p.value().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step: update,
                detail: format!("scene {}: non-finite parameters", scene.spec.index),
            });
        }

        result.losses.push(value);
        result
            .probe_delta_snr
            .push(probe.delta_snr(front, &student.evaluation_params()?)?);
        result.wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    result.state_fingerprint = student.fingerprint();
    Ok(result)
}

/// Trains only the adapters; the backbone is a frozen view and also serves
/// as teacher without adapters.
#[allow(clippy::too_many_arguments)]
pub fn adapt_scene_lora(
    front: &FrontEnd,
    base: &GruEnhancerParams,
    adapters: &mut AdapterSet,
    scene: &SceneDataset,
    cfg: &AdaptConfig,
    probe: &Probe,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptSessionResult> {
    let mut frozen = base.clone();
    frozen.set_trainable(false);
    adapters.params_mut().set_trainable(true);
    let student = Student::Lora {
        base: &frozen,
        adapters,
    };
    remix_session(
        Method::Lora,
        front,
        &frozen,
        student,
        scene,
        cfg,
        probe,
        rng,
    )
}

/// Trains every student parameter against a separate frozen teacher.
pub fn adapt_scene_remixit(
    front: &FrontEnd,
    student: &mut GruEnhancerParams,
    teacher: &GruEnhancerParams,
    scene: &SceneDataset,
    cfg: &AdaptConfig,
    probe: &Probe,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptSessionResult> {
    let mut frozen = teacher.clone();
    frozen.set_trainable(false);
    student.set_trainable(true);
    let out = remix_session(
        Method::Remixit,
        front,
        &frozen,
        Student::Full { params: student },
        scene,
        cfg,
        probe,
        rng,
    );
    student.set_trainable(false);
    out
}
