//! The GRU mask estimator: FC-in (tanh) -> GRU -> GRU -> FC-out (sigmoid),
//! operating frame by frame on compressed ERB features.

mod checkpoint;
mod pipeline;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pipeline::{neg_snr_on_tape, Analysis, FrontEnd, MaskedSynthesis, NEG_SNR_EPS};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, TargetLayer};

/// Parameter group id of backbone parameters on a tape.
pub const BACKBONE_GROUP: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub bands: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub const REFERENCE: ModelDims = ModelDims {
        bands: 128,
        hidden: 128,
    };
    pub const DESK: ModelDims = ModelDims {
        bands: 32,
        hidden: 32,
    };

    /// `2*bands*hidden` FC weights plus, per GRU layer, three gates of
    /// input weights, recurrent weights and one bias vector.
    pub fn param_count(&self) -> usize {
        let (b, h) = (self.bands, self.hidden);
        2 * b * h + 2 * 3 * (h * h + h * h + h)
    }
}

/// Offsets of the nine tensors inside one GRU layer.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Gate {
    Update = 0,
    Reset = 3,
    Candidate = 6,
}

pub(crate) const FC_IN: usize = 0;
pub(crate) const FC_OUT: usize = 19;
const LAYER_TENSORS: usize = 9;

pub(crate) fn gru_slot(layer: usize, gate: Gate, part: usize) -> usize {
    1 + layer * LAYER_TENSORS + gate as usize + part
}

/// All backbone weights, in checkpoint declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct GruEnhancerParams {
    dims: ModelDims,
    params: ParamSet,
}

impl GruEnhancerParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        if dims.bands == 0 || dims.hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate model dims {dims:?}"
            )));
        }
        let (b, h) = (dims.bands, dims.hidden);
        let mut params = ParamSet::new(BACKBONE_GROUP);
        params.push("fc_in.weight", Array2::zeros((b, h)), true);
        for layer in 0..2 {
            for gate in ["update", "reset", "candidate"] {
                params.push(
                    format!("gru{}.{gate}.input", layer + 1),
                    Array2::zeros((h, h)),
                    true,
                );
                params.push(
                    format!("gru{}.{gate}.recurrent", layer + 1),
                    Array2::zeros((h, h)),
                    true,
                );
                params.push(
                    format!("gru{}.{gate}.bias", layer + 1),
                    Array2::zeros((1, h)),
                    true,
                );
            }
        }
        params.push("fc_out.weight", Array2::zeros((h, b)), true);
        debug_assert_eq!(params.len(), FC_OUT + 1);
        Ok(Self { dims, params })
    }

    /// Uniform init in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        let mut me = Self::zeros(dims)?;
        for i in 0..me.params.len() {
            let value = me.params.value_mut(i);
            if value.nrows() == 1 {
                continue;
            }
            let bound = 1.0 / (value.nrows() as f64).sqrt();
            value.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(me)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.set_trainable(trainable);
    }

    pub(crate) fn target_index(target: TargetLayer) -> usize {
        match target {
            TargetLayer::FcIn => FC_IN,
            TargetLayer::FcOut => FC_OUT,
        }
    }

    pub fn weight(&self, target: TargetLayer) -> &Matrix {
        self.params.value(Self::target_index(target))
    }

    pub(crate) fn weight_mut(&mut self, target: TargetLayer) -> &mut Matrix {
        self.params.value_mut(Self::target_index(target))
    }
}

/// Tape handles for one GRU layer.
struct GruLayerVars {
    input: [Var; 3],
    recurrent: [Var; 3],
    bias: [Var; 3],
}

/// Tape handles for the whole model, recorded once per forward pass.
pub(crate) struct ModelVars {
    fc_in: Var,
    fc_out: Var,
    layers: [GruLayerVars; 2],
    adapters: Vec<(TargetLayer, Var, Var, f64)>,
}

impl ModelVars {
    pub(crate) fn record(
        tape: &mut Tape,
        params: &GruEnhancerParams,
        adapters: Option<&AdapterSet>,
    ) -> Result<Self> {
        let ps = params.params();
        let layer = |l: usize, tape: &mut Tape| -> Result<GruLayerVars> {
            let v =
                |gate: Gate, part: usize, tape: &mut Tape| tape.param(ps, gru_slot(l, gate, part));
            Ok(GruLayerVars {
                input: [
                    v(Gate::Update, 0, tape)?,
                    v(Gate::Reset, 0, tape)?,
                    v(Gate::Candidate, 0, tape)?,
                ],
                recurrent: [
                    v(Gate::Update, 1, tape)?,
                    v(Gate::Reset, 1, tape)?,
                    v(Gate::Candidate, 1, tape)?,
                ],
                bias: [
                    v(Gate::Update, 2, tape)?,
                    v(Gate::Reset, 2, tape)?,
                    v(Gate::Candidate, 2, tape)?,
                ],
            })
        };
        let fc_in = tape.param(ps, FC_IN)?;
        let layers = [layer(0, tape)?, layer(1, tape)?];
        let fc_out = tape.param(ps, FC_OUT)?;
        let mut adapter_vars = Vec::new();
        if let Some(set) = adapters {
            set.check_dims(params.dims())?;
            for &target in set.config().targets.iter() {
                let (a, b) = set.indices(target)?;
                let a = tape.param(set.params(), a)?;
                let b = tape.param(set.params(), b)?;
                adapter_vars.push((target, a, b, set.config().scale));
            }
        }
        Ok(Self {
            fc_in,
            fc_out,
            layers,
            adapters: adapter_vars,
        })
    }

    /// `x W0 + scale * (x A^T) B^T` for adapted layers, `x W0` otherwise.
    fn project(&self, tape: &mut Tape, x: Var, target: TargetLayer) -> Result<Var> {
        let w = match target {
            TargetLayer::FcIn => self.fc_in,
            TargetLayer::FcOut => self.fc_out,
        };
        let base = tape.matmul(x, w)?;
        match self.adapters.iter().find(|(t, ..)| *t == target) {
            Some(&(_, a, b, scale)) => {
                let low = tape.matmul_t(x, a)?;
                let up = tape.matmul_t(low, b)?;
                let scaled = tape.scale(up, scale)?;
                tape.add(base, scaled)
            }
            None => Ok(base),
        }
    }
}

/// One GRU step on a batch (rows) of inputs. The reset gate multiplies the
/// previous state before the candidate's recurrent matmul.
fn gru_step(tape: &mut Tape, layer: &GruLayerVars, x: Var, h_prev: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, i: usize, h: Var| -> Result<Var> {
        let xi = tape.matmul(x, layer.input[i])?;
        let hi = tape.matmul(h, layer.recurrent[i])?;
        let s = tape.add(xi, hi)?;
        tape.add_row(s, layer.bias[i])
    };
    let z_pre = gate(tape, 0, h_prev)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, 1, h_prev)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h_prev)?;
    let c_pre = gate(tape, 2, rh)?;
    let cand = tape.tanh(c_pre)?;
    // h = z * h_prev + (1 - z) * cand
    let diff = tape.sub(h_prev, cand)?;
    let gated = tape.mul(z, diff)?;
    tape.add(cand, gated)
}

/// Single GRU cell evaluation outside any training graph.
pub fn gru_cell(
    params: &GruEnhancerParams,
    layer: usize,
    x: &Matrix,
    h_prev: &Matrix,
) -> Result<Matrix> {
    if layer > 1 {
        return Err(Error::InvalidInput(format!(
            "GRU layer {layer} does not exist"
        )));
    }
    let h = params.dims().hidden;
    if x.ncols() != h || h_prev.ncols() != h || x.nrows() != h_prev.nrows() {
        return Err(Error::shape(
            "gru_cell",
            format!("input {:?}, state {:?}, hidden {h}", x.dim(), h_prev.dim()),
        ));
    }
    let mut frozen = params.clone();
    frozen.set_trainable(false);
    let mut tape = Tape::new();
    let vars = ModelVars::record(&mut tape, &frozen, None)?;
    let xv = tape.constant(x.clone())?;
    let hv = tape.constant(h_prev.clone())?;
    let out = gru_step(&mut tape, &vars.layers[layer], xv, hv)?;
    Ok(tape.value(out).clone())
}

/// Runs the model causally over `frames` (each `batch x bands`) from zero
/// initial state and returns one `batch x bands` mask node per frame.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    dims: ModelDims,
    frames: &[Var],
) -> Result<Vec<Var>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let (batch, bands) = tape.value(*first).dim();
    if bands != dims.bands {
        return Err(Error::shape(
            "forward",
            format!("features have {bands} bands, model expects {}", dims.bands),
        ));
    }
    let zero = tape.constant(Array2::zeros((batch, dims.hidden)))?;
    let mut h1 = zero;
    let mut h2 = zero;
    let mut masks = Vec::with_capacity(frames.len());
    for &x in frames {
        if tape.value(x).dim() != (batch, bands) {
            return Err(Error::shape("forward", "ragged frame batch"));
        }
        let pre = vars.project(tape, x, TargetLayer::FcIn)?;
        let a = tape.tanh(pre)?;
        h1 = gru_step(tape, &vars.layers[0], a, h1)?;
        h2 = gru_step(tape, &vars.layers[1], h1, h2)?;
        let out = vars.project(tape, h2, TargetLayer::FcOut)?;
        masks.push(tape.sigmoid(out)?);
    }
    Ok(masks)
}

/// Mask for one utterance's features (frames x bands), values in (0, 1).
pub fn forward(
    features: &Matrix,
    params: &GruEnhancerParams,
    adapters: Option<&AdapterSet>,
) -> Result<Matrix> {
    let dims = params.dims();
    if features.ncols() != dims.bands {
        return Err(Error::shape(
            "forward",
            format!(
                "features have {} bands, model expects {}",
                features.ncols(),
                dims.bands
            ),
        ));
    }
    let mut tape = Tape::new();
    let frozen = frozen_view(params);
    let frozen_adapters = adapters.map(|a| {
        let mut a = a.clone();
        a.params_mut().set_trainable(false);
        a
    });
    let vars = ModelVars::record(&mut tape, &frozen, frozen_adapters.as_ref())?;
    let mut frame_vars = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        frame_vars.push(tape.constant(row.to_owned().insert_axis(ndarray::Axis(0)))?);
    }
    let masks = forward_on_tape(&mut tape, &vars, dims, &frame_vars)?;
    let mut out = Array2::zeros(features.dim());
    for (t, m) in masks.iter().enumerate() {
        out.row_mut(t).assign(&tape.value(*m).row(0));
    }
    Ok(out)
}

/// stft -> ERB features -> mask -> gated spectrum -> istft, with the
/// reference analysis settings for the model's band count.
pub fn enhance(
    wave: &crate::signal::Waveform,
    params: &GruEnhancerParams,
    adapters: Option<&AdapterSet>,
) -> Result<crate::signal::Waveform> {
    FrontEnd::new(params.dims().bands)?.enhance(wave, params, adapters)
}

pub(crate) fn frozen_view(params: &GruEnhancerParams) -> GruEnhancerParams {
    let mut p = params.clone();
    p.set_trainable(false);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_parameter_count() {
        assert_eq!(ModelDims::REFERENCE.param_count(), 230_144);
        let p = GruEnhancerParams::zeros(ModelDims::REFERENCE).unwrap();
        assert_eq!(p.param_count(), 230_144);
    }

    #[test]
    fn toy_parameter_count() {
        // fc_in 4*4 + fc_out 4*4 + 2 layers * 3 gates * (16 + 16 + 4)
        let dims = ModelDims {
            bands: 4,
            hidden: 4,
        };
        assert_eq!(dims.param_count(), 16 + 16 + 2 * 3 * 36);
        assert_eq!(GruEnhancerParams::zeros(dims).unwrap().param_count(), 248);
    }

    #[test]
    fn zero_everything_gives_zero_state() {
        let p = GruEnhancerParams::zeros(ModelDims {
            bands: 3,
            hidden: 3,
        })
        .unwrap();
        let h = gru_cell(&p, 0, &Array2::zeros((1, 3)), &Array2::zeros((1, 3))).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let mut p = GruEnhancerParams::zeros(ModelDims {
            bands: 2,
            hidden: 2,
        })
        .unwrap();
        p.params_mut()
            .value_mut(gru_slot(0, Gate::Update, 2))
            .fill(40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for slot in [
            gru_slot(0, Gate::Candidate, 0),
            gru_slot(0, Gate::Candidate, 1),
        ] {
            p.params_mut()
                .value_mut(slot)
                .mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let h_prev = array![[0.3, -0.8]];
        let h = gru_cell(&p, 0, &array![[0.5, 0.9]], &h_prev).unwrap();
        for (a, b) in h.iter().zip(h_prev.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_unit_matches_hand_evaluation() {
        let mut p = GruEnhancerParams::zeros(ModelDims {
            bands: 1,
            hidden: 1,
        })
        .unwrap();
        let set = |p: &mut GruEnhancerParams, gate, part, v: f64| {
            p.params_mut().value_mut(gru_slot(1, gate, part)).fill(v)
        };
        set(&mut p, Gate::Update, 0, 0.5);
        set(&mut p, Gate::Update, 1, -0.3);
        set(&mut p, Gate::Update, 2, 0.1);
        set(&mut p, Gate::Reset, 0, -0.7);
        set(&mut p, Gate::Reset, 1, 0.2);
        set(&mut p, Gate::Reset, 2, 0.05);
        set(&mut p, Gate::Candidate, 0, 1.2);
        set(&mut p, Gate::Candidate, 1, 0.8);
        set(&mut p, Gate::Candidate, 2, -0.4);
        let (x, hp) = (0.6f64, -0.25f64);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = sig(0.5 * x - 0.3 * hp + 0.1);
        let r = sig(-0.7 * x + 0.2 * hp + 0.05);
        let c = (1.2 * x + 0.8 * (r * hp) - 0.4).tanh();
        let expected = z * hp + (1.0 - z) * c;
        let h = gru_cell(&p, 1, &array![[x]], &array![[hp]]).unwrap();
        assert!(
            (h[[0, 0]] - expected).abs() < 1e-12,
            "{} vs {expected}",
            h[[0, 0]]
        );
    }

    #[test]
    fn mask_is_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GruEnhancerParams::init(
            ModelDims {
                bands: 6,
                hidden: 5,
            },
            &mut rng,
        )
        .unwrap();
        let feats = Array2::from_shape_fn((12, 6), |_| rng.random_range(0.0..3.0));
        let m = forward(&feats, &p, None).unwrap();
        assert_eq!(m.dim(), (12, 6));
        assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_recurrence_is_frame_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = GruEnhancerParams::init(
            ModelDims {
                bands: 4,
                hidden: 4,
            },
            &mut rng,
        )
        .unwrap();
        for layer in 0..2 {
            for gate in [Gate::Update, Gate::Reset, Gate::Candidate] {
                p.params_mut().value_mut(gru_slot(layer, gate, 1)).fill(0.0);
            }
            // With zero recurrence the state still feeds the update blend;
            // force z = 0 so the new state is the candidate alone.
            p.params_mut()
                .value_mut(gru_slot(layer, Gate::Update, 0))
                .fill(0.0);
            p.params_mut()
                .value_mut(gru_slot(layer, Gate::Update, 2))
                .fill(-60.0);
        }
        let row = array![[0.4, 1.1, 0.2, 0.7]];
        let feats = ndarray::concatenate![ndarray::Axis(0), row, row, row];
        let m = forward(&feats, &p, None).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(m.row(1), m.row(2));
    }

    #[test]
    fn band_mismatch_is_a_shape_error() {
        let p = GruEnhancerParams::zeros(ModelDims {
            bands: 4,
            hidden: 4,
        })
        .unwrap();
        assert!(matches!(
            forward(&Array2::zeros((3, 5)), &p, None),
            Err(Error::Shape { .. })
        ));
    }
}
