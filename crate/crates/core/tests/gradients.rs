use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sela_core::autodiff::{grad_check, sample_coords, Adam, ParamSet, Tape, Var};
use sela_core::lora::{init_adapters, LoraConfig};
use sela_core::model::{neg_snr_on_tape, FrontEnd, GruEnhancerParams, ModelDims};
use sela_core::scenes::synth_speech;
use sela_core::signal::{mix_at_snr, Waveform};
use sela_core::{Error, Result};

fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Two trainable inputs of the given shapes, with a fixed random weighting
/// so the scalar output depends on every element.
fn check_binary<F>(a: Array2<f64>, b: Array2<f64>, seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape, Var, Var) -> Result<Var>,
{
    let mut ps = ParamSet::new(0);
    ps.push("a", a, true);
    ps.push("b", b, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = None;
    let coords = sample_coords(&ps, 40, seed);
    grad_check(&mut ps, 1e-4, Some(&coords), |tape, p| {
        let a = tape.param(p, 0)?;
        let b = tape.param(p, 1)?;
        let out = op(tape, a, b)?;
        let (r, c) = tape.value(out).dim();
        let w = weights
            .get_or_insert_with(|| random(r, c, -1.0, 1.0, &mut rng))
            .clone();
        let w = tape.constant(w)?;
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    })
    .unwrap()
}

fn check_unary<F>(a: Array2<f64>, seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let b = Array2::zeros((1, 1));
    let mut ps = ParamSet::new(0);
    ps.push("a", a, true);
    ps.push("unused", b, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = None;
    let coords = sample_coords(&ps, 40, seed);
    grad_check(&mut ps, 1e-4, Some(&coords), |tape, p| {
        let a = tape.param(p, 0)?;
        let out = op(tape, a)?;
        let (r, c) = tape.value(out).dim();
        let w = weights
            .get_or_insert_with(|| random(r, c, -1.0, 1.0, &mut rng))
            .clone();
        let w = tape.constant(w)?;
        let weighted = tape.mul(out, w)?;
        tape.sum(weighted)
    })
    .unwrap()
}

const TOL: f64 = 1e-5;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matmul(m in 1usize..64, k in 1usize..64, n in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(m, k, -1.0, 1.0, &mut rng);
        let b = random(k, n, -1.0, 1.0, &mut rng);
        prop_assert!(check_binary(a, b, seed, |t, a, b| t.matmul(a, b)) <= TOL);
    }

    #[test]
    fn matmul_t(m in 1usize..64, k in 1usize..64, n in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(m, k, -1.0, 1.0, &mut rng);
        let b = random(n, k, -1.0, 1.0, &mut rng);
        prop_assert!(check_binary(a, b, seed, |t, a, b| t.matmul_t(a, b)) <= TOL);
    }

    #[test]
    fn elementwise(m in 1usize..64, n in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(m, n, -2.0, 2.0, &mut rng);
        let b = random(m, n, -2.0, 2.0, &mut rng);
        prop_assert!(check_binary(a.clone(), b.clone(), seed, |t, a, b| t.add(a, b)) <= TOL);
        prop_assert!(check_binary(a.clone(), b.clone(), seed, |t, a, b| t.sub(a, b)) <= TOL);
        prop_assert!(check_binary(a.clone(), b, seed, |t, a, b| t.mul(a, b)) <= TOL);
        let row = random(1, n, -2.0, 2.0, &mut rng);
        prop_assert!(check_binary(a.clone(), row, seed, |t, a, r| t.add_row(a, r)) <= TOL);
        prop_assert!(check_unary(a.clone(), seed, |t, a| t.scale(a, -1.7)) <= TOL);
        prop_assert!(check_unary(a.clone(), seed, |t, a| t.sigmoid(a)) <= TOL);
        prop_assert!(check_unary(a, seed, |t, a| t.tanh(a)) <= TOL);
    }

    #[test]
    fn reductions_and_logs(m in 1usize..64, n in 1usize..64, c in 0.1f64..2.5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(m, n, -2.0, 2.0, &mut rng);
        let pos = random(m, n, 0.2, 3.0, &mut rng);
        prop_assert!(check_unary(a.clone(), seed, |t, a| t.sum(a)) <= TOL);
        prop_assert!(check_unary(a.clone(), seed, |t, a| t.sum_rows(a)) <= TOL);
        prop_assert!(check_unary(a, seed, |t, a| t.mean(a)) <= TOL);
        prop_assert!(check_unary(pos.clone(), seed, move |t, a| t.power(a, c)) <= TOL);
        prop_assert!(check_unary(pos, seed, |t, a| t.log10(a)) <= TOL);
    }
}

/// 0.2 s of noisy speech at 0 dB and its clean source.
fn short_pair(seed: u64) -> (Waveform, Waveform) {
    let full = synth_speech(2, 0.5, seed).unwrap();
    let speech = Waveform::from_samples(full.samples()[4000..7200].to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let noise = Waveform::from_samples(
        (0..speech.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let (noisy, _) = mix_at_snr(&speech, &noise, 0.0).unwrap();
    (noisy, speech)
}

fn desk_model(seed: u64) -> GruEnhancerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GruEnhancerParams::init(ModelDims::DESK, &mut rng).unwrap()
}

#[test]
fn pretraining_loss_gradient() {
    let front = FrontEnd::new(ModelDims::DESK.bands).unwrap();
    let (noisy, clean) = short_pair(1);
    let noisy = [front.analyze(&noisy).unwrap()];
    let clean = [front.analyze(&clean).unwrap().features];
    let template = desk_model(2);
    let mut ps = template.params().clone();
    let coords = sample_coords(&ps, 50, 3);
    let err = grad_check(&mut ps, 1e-4, Some(&coords), |tape, p| {
        let mut model = template.clone();
        *model.params_mut() = p.clone();
        front.feature_mse_on_tape(tape, &model, None, &noisy, &clean)
    })
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn adaptation_loss_gradient_full_parameters() {
    let front = FrontEnd::new(ModelDims::DESK.bands).unwrap();
    let (noisy, clean) = short_pair(4);
    let noisy = [front.analyze(&noisy).unwrap()];
    let target = Array2::from_shape_vec((1, clean.len()), clean.samples().to_vec()).unwrap();
    let template = desk_model(5);
    let mut ps = template.params().clone();
    let coords = sample_coords(&ps, 50, 6);
    let err = grad_check(&mut ps, 1e-4, Some(&coords), |tape, p| {
        let mut model = template.clone();
        *model.params_mut() = p.clone();
        let out = front.enhance_on_tape(tape, &model, None, &noisy)?;
        neg_snr_on_tape(tape, out, &target)
    })
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn adaptation_loss_gradient_adapters() {
    let front = FrontEnd::new(ModelDims::DESK.bands).unwrap();
    let (noisy, clean) = short_pair(7);
    let noisy = [front.analyze(&noisy).unwrap()];
    let target = Array2::from_shape_vec((1, clean.len()), clean.samples().to_vec()).unwrap();
    let mut base = desk_model(8);
    base.set_trainable(false);
    let cfg = LoraConfig {
        rank: 2,
        scale: 4.0,
        targets: LoraConfig::reference().targets,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut template = init_adapters(&cfg, ModelDims::DESK, 0, &mut rng).unwrap();
    // Nonzero B so the gradient of A is not identically zero.
    for i in 0..template.params().len() {
        let v = template.params_mut().value_mut(i);
        v.mapv_inplace(|_| rng.random_range(-0.1..0.1));
    }
    let mut ps = template.params().clone();
    let coords = sample_coords(&ps, 50, 10);
    let err = grad_check(&mut ps, 1e-4, Some(&coords), |tape, p| {
        let mut adapters = template.clone();
        *adapters.params_mut() = p.clone();
        let out = front.enhance_on_tape(tape, &base, Some(&adapters), &noisy)?;
        neg_snr_on_tape(tape, out, &target)
    })
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn a_tape_backs_up_once() {
    let mut ps = ParamSet::new(0);
    ps.push("x", Array2::ones((2, 2)), true);
    let mut tape = Tape::new();
    let x = tape.param(&ps, 0).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    assert!(tape.constant(Array2::ones((1, 1))).is_err());
}

#[test]
fn adam_leaves_frozen_parameters_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamSet::new(0);
    ps.push("live", random(3, 4, -1.0, 1.0, &mut rng), true);
    ps.push("frozen", random(4, 2, -1.0, 1.0, &mut rng), false);
    let frozen_before = ps.value(1).clone();
    let live_before = ps.value(0).clone();
    let mut adam = Adam::new(1e-2);
    for _ in 0..5 {
        let mut tape = Tape::new();
        let a = tape.param(&ps, 0).unwrap();
        let b = tape.param(&ps, 1).unwrap();
        let y = tape.matmul(a, b).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        ps.accumulate(&grads).unwrap();
        adam.step(&mut ps).unwrap();
    }
    assert_eq!(ps.value(1), &frozen_before);
    assert_ne!(ps.value(0), &live_before);
}
