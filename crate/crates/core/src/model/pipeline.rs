use std::sync::Arc;

use ndarray::{Array2, Axis};

use super::{forward_on_tape, frozen_view, GruEnhancerParams, ModelVars};
use crate::autodiff::{LinearMap, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::signal::{
    apply_erb_mask, make_erb_filterbank, ComplexSpectrogram, ErbFilterbank, Stft, StftConfig,
    Waveform, POWER_FLOOR, SAMPLE_RATE,
};

/// Keeps the negative-SNR loss finite when the estimate equals the target.
pub const NEG_SNR_EPS: f64 = 1e-10;

/// Analysis front end shared by training and inference: STFT, ERB pooling,
/// power-law compression and mask expansion.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    stft: Stft,
    filterbank: ErbFilterbank,
    compression: f64,
    pooling: Matrix,
}

/// Everything the model and the losses need to know about one utterance.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub spec: ComplexSpectrogram,
    pub magnitudes: Matrix,
    pub features: Matrix,
    pub len: usize,
}

impl FrontEnd {
    pub const COMPRESSION: f64 = 0.3;

    pub fn new(bands: usize) -> Result<Self> {
        Self::with_config(bands, StftConfig::REFERENCE, Self::COMPRESSION)
    }

    pub fn with_config(bands: usize, stft: StftConfig, compression: f64) -> Result<Self> {
        if !(compression > 0.0 && compression <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "compression exponent {compression} not in (0, 1]"
            )));
        }
        let filterbank = make_erb_filterbank(bands, stft.bins(), SAMPLE_RATE)?;
        Ok(Self {
            stft: Stft::new(stft)?,
            pooling: filterbank.pooling(),
            filterbank,
            compression,
        })
    }

    pub fn bands(&self) -> usize {
        self.filterbank.bands()
    }

    pub fn filterbank(&self) -> &ErbFilterbank {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn compression(&self) -> f64 {
        self.compression
    }

    pub fn analyze(&self, wave: &Waveform) -> Result<Analysis> {
        let spec = self.stft.analyze(wave)?;
        let magnitudes = spec.magnitudes();
        let features = self.compress(&magnitudes);
        Ok(Analysis {
            spec,
            magnitudes,
            features,
            len: wave.len(),
        })
    }

    /// Compressed band magnitudes of a frames x bins magnitude matrix.
    pub fn compress(&self, magnitudes: &Matrix) -> Matrix {
        let c = self.compression;
        magnitudes.dot(&self.pooling).mapv(|m| m.powf(c))
    }

    /// Enhances one waveform; output has the input's length.
    pub fn enhance(
        &self,
        wave: &Waveform,
        params: &GruEnhancerParams,
        adapters: Option<&AdapterSet>,
    ) -> Result<Waveform> {
        let mut out = self.enhance_batch(std::slice::from_ref(wave), params, adapters)?;
        Ok(out.remove(0))
    }

    /// Enhances several waveforms, running equal-length inputs as one batch.
    pub fn enhance_batch(
        &self,
        waves: &[Waveform],
        params: &GruEnhancerParams,
        adapters: Option<&AdapterSet>,
    ) -> Result<Vec<Waveform>> {
        let mut out: Vec<Option<Waveform>> = vec![None; waves.len()];
        let mut lengths: Vec<usize> = waves.iter().map(Waveform::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let frozen = frozen_view(params);
        let frozen_adapters = adapters.map(|a| {
            let mut a = a.clone();
            a.params_mut().set_trainable(false);
            a
        });
        for len in lengths {
            let idx: Vec<usize> = (0..waves.len())
                .filter(|&i| waves[i].len() == len)
                .collect();
            let analyses = idx
                .iter()
                .map(|&i| self.analyze(&waves[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let vars = ModelVars::record(&mut tape, &frozen, frozen_adapters.as_ref())?;
            let frames = self.feature_frames(&mut tape, &analyses)?;
            let masks = forward_on_tape(&mut tape, &vars, params.dims(), &frames)?;
            for (row, (&i, a)) in idx.iter().zip(&analyses).enumerate() {
                let mut mask = Array2::zeros((a.spec.frames(), self.bands()));
                for (t, m) in masks.iter().enumerate() {
                    mask.row_mut(t).assign(&tape.value(*m).row(row));
                }
                let masked = apply_erb_mask(&a.spec, &mask, &self.filterbank)?;
                let full = self.stft.synthesize(&masked)?;
                out[i] = Some(Waveform::new(
                    full.samples()[..len].to_vec(),
                    waves[i].sample_rate(),
                )?);
            }
        }
        Ok(out
            .into_iter()
            .map(|w| w.expect("every length group processed"))
            .collect())
    }

    /// One constant `batch x bands` feature node per frame.
    pub(crate) fn feature_frames(
        &self,
        tape: &mut Tape,
        analyses: &[Analysis],
    ) -> Result<Vec<Var>> {
        let frames = check_batch(analyses)?;
        let bands = self.bands();
        (0..frames)
            .map(|t| {
                let m = Array2::from_shape_fn((analyses.len(), bands), |(b, k)| {
                    analyses[b].features[[t, k]]
                });
                tape.constant(m)
            })
            .collect()
    }

    /// Records the batch forward pass and returns per-frame gain nodes
    /// (`batch x bins`).
    pub(crate) fn gains_on_tape(
        &self,
        tape: &mut Tape,
        params: &GruEnhancerParams,
        adapters: Option<&AdapterSet>,
        analyses: &[Analysis],
    ) -> Result<Vec<Var>> {
        let vars = ModelVars::record(tape, params, adapters)?;
        let frames = self.feature_frames(tape, analyses)?;
        let masks = forward_on_tape(tape, &vars, params.dims(), &frames)?;
        let expansion = tape.constant(self.filterbank.expansion().clone())?;
        masks
            .into_iter()
            .map(|m| tape.matmul(m, expansion))
            .collect()
    }

    /// Mean squared error between the compressed ERB features of the masked
    /// noisy spectra and the clean targets (`frames x bands` each).
    pub fn feature_mse_on_tape(
        &self,
        tape: &mut Tape,
        params: &GruEnhancerParams,
        adapters: Option<&AdapterSet>,
        noisy: &[Analysis],
        clean_features: &[Matrix],
    ) -> Result<Var> {
        if noisy.len() != clean_features.len() {
            return Err(Error::shape("feature_mse", "batch size mismatch"));
        }
        let frames = check_batch(noisy)?;
        for c in clean_features {
            if c.dim() != (frames, self.bands()) {
                return Err(Error::shape(
                    "feature_mse",
                    format!(
                        "target {:?}, expected ({frames}, {})",
                        c.dim(),
                        self.bands()
                    ),
                ));
            }
        }
        let gains = self.gains_on_tape(tape, params, adapters, noisy)?;
        let pooling = tape.constant(self.pooling.clone())?;
        let bins = self.stft.config().bins();
        let mut total: Option<Var> = None;
        for (t, gain) in gains.into_iter().enumerate() {
            let mags =
                Array2::from_shape_fn((noisy.len(), bins), |(b, k)| noisy[b].magnitudes[[t, k]]);
            let mags = tape.constant(mags)?;
            let masked = tape.mul(gain, mags)?;
            let pooled = tape.matmul(masked, pooling)?;
            let est = tape.power(pooled, self.compression)?;
            let target = Array2::from_shape_fn((noisy.len(), self.bands()), |(b, k)| {
                clean_features[b][[t, k]]
            });
            let target = tape.constant(target)?;
            let d = tape.sub(est, target)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let total = total.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        tape.scale(total, 1.0 / (frames * noisy.len() * self.bands()) as f64)
    }

    /// Enhanced waveforms of a batch as a `batch x len` node.
    pub fn enhance_on_tape(
        &self,
        tape: &mut Tape,
        params: &GruEnhancerParams,
        adapters: Option<&AdapterSet>,
        analyses: &[Analysis],
    ) -> Result<Var> {
        let gains = self.gains_on_tape(tape, params, adapters, analyses)?;
        let synth = MaskedSynthesis::new(self.stft.clone(), analyses)?;
        tape.linear(&gains, Arc::new(synth))
    }
}

fn check_batch(analyses: &[Analysis]) -> Result<usize> {
    let first = analyses
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let frames = first.spec.frames();
    if analyses
        .iter()
        .any(|a| a.spec.frames() != frames || a.len != first.len)
    {
        return Err(Error::shape(
            "batch",
            "utterances in a batch must have equal length",
        ));
    }
    Ok(frames)
}

/// Linear map from per-frame real gains (`frames` inputs of `batch x bins`)
/// to the synthesized, length-trimmed waveforms (`batch x len`) of the
/// gated spectra.
pub struct MaskedSynthesis {
    stft: Stft,
    spectra: Vec<ComplexSpectrogram>,
    len: usize,
}

impl MaskedSynthesis {
    pub fn new(stft: Stft, analyses: &[Analysis]) -> Result<Self> {
        check_batch(analyses)?;
        Ok(Self {
            stft,
            spectra: analyses.iter().map(|a| a.spec.clone()).collect(),
            len: analyses[0].len,
        })
    }
}

impl LinearMap for MaskedSynthesis {
    fn name(&self) -> &'static str {
        "masked_synthesis"
    }

    fn apply(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let frames = self.spectra[0].frames();
        if inputs.len() != frames {
            return Err(Error::shape(
                "masked_synthesis",
                format!(
                    "{} gain frames for {frames} spectrogram frames",
                    inputs.len()
                ),
            ));
        }
        let mut out = Array2::zeros((self.spectra.len(), self.len));
        for (b, spec) in self.spectra.iter().enumerate() {
            let mut data = spec.data().clone();
            for (t, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
                let g = inputs[t].row(b);
                row.zip_mut_with(&g, |c, &gain| *c *= gain);
            }
            let wave = self
                .stft
                .synthesize(&ComplexSpectrogram::new(data, spec.config())?)?;
            out.row_mut(b)
                .iter_mut()
                .zip(wave.samples())
                .for_each(|(o, s)| *o = *s);
        }
        Ok(out)
    }

    fn adjoint(&self, grad_output: &Matrix) -> Result<Vec<Matrix>> {
        let frames = self.spectra[0].frames();
        let bins = self.spectra[0].bins();
        let mut grads = vec![Array2::zeros((self.spectra.len(), bins)); frames];
        for (b, spec) in self.spectra.iter().enumerate() {
            let row = grad_output.row(b);
            let g = self
                .stft
                .gain_adjoint(spec, row.as_slice().expect("standard layout"))?;
            for (t, grad) in grads.iter_mut().enumerate() {
                grad.row_mut(b).assign(&g.row(t));
            }
        }
        Ok(grads)
    }
}

/// Mean over the batch of `-10 log10(|ref|^2 / (|est - ref|^2 + eps))`.
pub fn neg_snr_on_tape(tape: &mut Tape, estimate: Var, reference: &Matrix) -> Result<Var> {
    if tape.value(estimate).dim() != reference.dim() {
        return Err(Error::shape(
            "neg_snr",
            format!("{:?} vs {:?}", tape.value(estimate).dim(), reference.dim()),
        ));
    }
    let ref_energy = reference.map_axis(Axis(1), |r| r.dot(&r));
    let n = reference.ncols().max(1) as f64;
    if let Some(i) = ref_energy.iter().position(|&e| e / n < POWER_FLOOR) {
        return Err(Error::InvalidInput(format!("pseudo-target {i} is silent")));
    }
    let r = tape.constant(reference.clone())?;
    let d = tape.sub(estimate, r)?;
    let sq = tape.mul(d, d)?;
    let err = tape.sum_rows(sq)?;
    let eps = tape.constant(Array2::from_elem((reference.nrows(), 1), NEG_SNR_EPS))?;
    let err = tape.add(err, eps)?;
    let lg = tape.log10(err)?;
    let err_db = tape.scale(lg, 10.0)?;
    let ref_db = ref_energy.mapv(|e| 10.0 * e.log10()).insert_axis(Axis(1));
    let ref_db = tape.constant(ref_db)?;
    let per_item = tape.sub(err_db, ref_db)?;
    tape.mean(per_item)
}
