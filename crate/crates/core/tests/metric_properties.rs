use proptest::prelude::*;

use sela_core::metrics::{si_sdr, snr_db};

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (8usize..200).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

proptest! {
    #[test]
    fn si_sdr_ignores_scale((x, s) in pair(), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
        prop_assume!(energy(&s) > 1e-3 && energy(&x) > 1e-3);
        let base = si_sdr(&x, &s).unwrap();
        prop_assume!(base.abs() < 90.0);
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        prop_assert!((si_sdr(&scaled, &s).unwrap() - base).abs() <= 1e-9);
    }

    /// Rescaling the estimate by its least-squares gain never lowers SNR.
    #[test]
    fn optimal_gain_never_lowers_snr((x, s) in pair()) {
        prop_assume!(energy(&s) > 1e-3 && energy(&x) > 1e-3);
        let gain = x.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / energy(&x);
        let scaled: Vec<f64> = x.iter().map(|v| v * gain).collect();
        prop_assert!(snr_db(&scaled, &s).unwrap() >= snr_db(&x, &s).unwrap() - 1e-9);
    }
}

/// SI-SDR rescales the reference rather than the estimate, so it can sit
/// below plain SNR.
#[test]
fn si_sdr_can_be_below_snr() {
    let s = [1.0, 0.0];
    let x = [0.9, 0.5];
    // SNR = 1 / (0.1^2 + 0.5^2); SI-SDR = 0.9^2 / 0.5^2
    let snr = 10.0 * (1.0f64 / 0.26).log10();
    let sisdr = 10.0 * (0.81f64 / 0.25).log10();
    assert!((snr_db(&x, &s).unwrap() - snr).abs() < 1e-12);
    assert!((si_sdr(&x, &s).unwrap() - sisdr).abs() < 1e-12);
    assert!(sisdr < snr - 0.7);
}
