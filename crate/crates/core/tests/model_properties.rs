use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sela_core::lora::{init_adapters, merge, LoraConfig};
use sela_core::model::{enhance, forward, GruEnhancerParams, ModelDims};
use sela_core::scenes::synth_speech;

fn model(bands: usize, hidden: usize, seed: u64) -> GruEnhancerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GruEnhancerParams::init(ModelDims { bands, hidden }, &mut rng).unwrap()
}

fn features(frames: usize, bands: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((frames, bands), |_| rng.random_range(0.0..3.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn masks_lie_in_the_unit_interval(
        bands in 2usize..24,
        hidden in 2usize..24,
        frames in 1usize..30,
        seed in any::<u64>(),
    ) {
        let m = forward(&features(frames, bands, seed), &model(bands, hidden, seed), None).unwrap();
        prop_assert_eq!(m.dim(), (frames, bands));
        prop_assert!(m.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn future_frames_do_not_change_past_masks(
        bands in 2usize..16,
        hidden in 2usize..16,
        frames in 2usize..20,
        cut in 0usize..19,
        seed in any::<u64>(),
    ) {
        let cut = cut % (frames - 1) + 1;
        let p = model(bands, hidden, seed);
        let x = features(frames, bands, seed);
        let mut y = x.clone();
        y.slice_mut(ndarray::s![cut.., ..]).mapv_inplace(|v| v * 2.0 + 1.0);
        let (mx, my) = (forward(&x, &p, None).unwrap(), forward(&y, &p, None).unwrap());
        prop_assert_eq!(mx.slice(ndarray::s![..cut, ..]), my.slice(ndarray::s![..cut, ..]));
        prop_assert_ne!(mx.row(cut), my.row(cut));
    }

    #[test]
    fn merged_weights_match_the_adapter_path(
        bands in 2usize..20,
        hidden in 2usize..20,
        rank_pick in 0usize..2,
        scale_pick in 0usize..2,
        seed in any::<u64>(),
    ) {
        let rank = [1, 4][rank_pick].min(bands).min(hidden);
        let scale = [1.0, 64.0][scale_pick];
        let dims = ModelDims { bands, hidden };
        let base = model(bands, hidden, seed);
        let cfg = LoraConfig { rank, scale, targets: LoraConfig::reference().targets };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let mut adapters = init_adapters(&cfg, dims, 0, &mut rng).unwrap();
        for i in 0..adapters.params().len() {
            adapters
                .params_mut()
                .value_mut(i)
                .mapv_inplace(|_| rng.random_range(-0.05..0.05));
        }
        let x = features(12, bands, seed);
        let via_adapters = forward(&x, &base, Some(&adapters)).unwrap();
        let via_merge = forward(&x, &merge(&base, &adapters).unwrap(), None).unwrap();
        let worst = via_adapters
            .iter()
            .zip(&via_merge)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prop_assert!(worst <= 1e-9, "{}", worst);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let p = model(32, 32, 3);
    let x = features(40, 32, 4);
    let a = forward(&x, &p, None).unwrap();
    let b = forward(&x, &p.clone(), None).unwrap();
    assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
}

#[test]
fn fresh_adapters_leave_enhancement_unchanged() {
    let dims = ModelDims::DESK;
    let base = model(dims.bands, dims.hidden, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let adapters = init_adapters(&LoraConfig::reference(), dims, 0, &mut rng).unwrap();
    let speech = synth_speech(1, 1.0, 7).unwrap();
    let plain = enhance(&speech, &base, None).unwrap();
    let adapted = enhance(&speech, &base, Some(&adapters)).unwrap();
    let merged = enhance(&speech, &merge(&base, &adapters).unwrap(), None).unwrap();
    assert_eq!(plain.samples(), adapted.samples());
    assert_eq!(plain.samples(), merged.samples());
}

#[test]
fn merge_leaves_the_backbone_alone() {
    let dims = ModelDims {
        bands: 6,
        hidden: 9,
    };
    let base = model(6, 9, 8);
    let before = base.fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut adapters = init_adapters(&LoraConfig::reference(), dims, 0, &mut rng).unwrap();
    for i in 0..adapters.params().len() {
        adapters.params_mut().value_mut(i).fill(0.1);
    }
    let merged = merge(&base, &adapters).unwrap();
    assert_eq!(base.fingerprint(), before);
    assert_ne!(merged.fingerprint(), before);
}
