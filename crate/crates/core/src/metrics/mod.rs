//! SI-SDR and SNR metrics plus aggregation into report tables.

mod report;

pub use report::{
    aggregate, read_results_csv, read_trajectory_csv, write_results_csv, write_trajectory_csv,
    AggregateReport, CellKey, CellStats, MetricRecord, ParamAccounting, TrajectoryRow,
};

use crate::error::{Error, Result};
use crate::signal::POWER_FLOOR;

/// Ratios are clamped to `+-SATURATION_DB`.
pub const SATURATION_DB: f64 = 100.0;
const SATURATION_RATIO: f64 = 1e-20;

pub fn is_saturated(db: f64) -> bool {
    db.abs() >= SATURATION_DB
}

fn check_pair(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() || reference.is_empty() {
        return Err(Error::shape(
            "metric",
            format!(
                "estimate has {} samples, reference {}",
                estimate.len(),
                reference.len()
            ),
        ));
    }
    let energy: f64 = reference.iter().map(|r| r * r).sum();
    if energy / (reference.len() as f64) < POWER_FLOOR {
        return Err(Error::InvalidInput("reference signal is silent".into()));
    }
    Ok(energy)
}

fn ratio_db(signal: f64, residual: f64) -> f64 {
    if residual < SATURATION_RATIO * signal {
        SATURATION_DB
    } else if signal == 0.0 {
        -SATURATION_DB
    } else {
        (10.0 * (signal / residual).log10()).clamp(-SATURATION_DB, SATURATION_DB)
    }
}

/// Scale-invariant SDR: the estimate is projected onto the reference and the
/// projection's power is compared with the residual's.
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = check_pair(estimate, reference)?;
    let dot: f64 = estimate.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let (mut target, mut residual) = (0.0, 0.0);
    for (e, r) in estimate.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    Ok(ratio_db(target, residual))
}

/// `10 log10(|ref|^2 / |est - ref|^2)`.
pub fn snr_db(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let ref_energy = check_pair(estimate, reference)?;
    let residual: f64 = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| (e - r) * (e - r))
        .sum();
    Ok(ratio_db(ref_energy, residual))
}

/// SNR gain of `adapted` over `pretrained` against the same reference.
pub fn delta_snr(adapted: &[f64], pretrained: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(snr_db(adapted, reference)? - snr_db(pretrained, reference)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn scaled_copies_saturate() {
        let s = random(256, 1);
        let twice: Vec<f64> = s.iter().map(|v| 2.0 * v).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(si_sdr(&s, &s).unwrap(), SATURATION_DB);
        assert_eq!(si_sdr(&twice, &s).unwrap(), SATURATION_DB);
        assert_eq!(si_sdr(&neg, &s).unwrap(), SATURATION_DB);
        assert_eq!(snr_db(&s, &s).unwrap(), SATURATION_DB);
    }

    #[test]
    fn orthogonal_perturbation_is_ten_db() {
        let s = random(512, 2);
        let mut e = random(512, 3);
        // Gram-Schmidt e against s, then set |e|^2 = |s|^2 / 10.
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let es: f64 = e.iter().zip(&s).map(|(a, b)| a * b).sum();
        e.iter_mut().zip(&s).for_each(|(a, b)| *a -= es / ss * b);
        let ee: f64 = e.iter().map(|v| v * v).sum();
        let k = (ss / 10.0 / ee).sqrt();
        let x: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + k * b).collect();
        assert!((si_sdr(&x, &s).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn delta_snr_cases() {
        let s = random(128, 4);
        let n = random(128, 5);
        let pre: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert_eq!(delta_snr(&pre, &pre, &s).unwrap(), 0.0);
        // Residual energy shrunk by 10^(3/10) raises SNR by exactly 3 dB.
        let k = 10f64.powf(-3.0 / 20.0);
        let post: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + k * b).collect();
        assert!((delta_snr(&post, &pre, &s).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn silent_reference_is_rejected() {
        assert!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]).is_err());
        assert!(snr_db(&[1.0], &[1.0, 2.0]).is_err());
    }
}
