use super::Waveform;
use crate::error::{Error, Result};

/// Signals with mean power below this are treated as silent.
pub const POWER_FLOOR: f64 = 1e-12;

/// Mean squared amplitude.
pub fn power(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Crops `noise` to `len` samples, or tiles it cyclically when shorter.
pub fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    if noise.len() >= len {
        noise[..len].to_vec()
    } else {
        noise.iter().copied().cycle().take(len).collect()
    }
}

/// Scales `noise` so that `clean + alpha * noise` has the requested SNR.
pub fn mix_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    target_snr_db: f64,
) -> Result<(Waveform, f64)> {
    if !target_snr_db.is_finite() {
        return Err(Error::InvalidInput(format!(
            "target SNR {target_snr_db} is not finite"
        )));
    }
    let noise = fit_length(noise.samples(), clean.len());
    let p_clean = clean.power();
    let p_noise = power(&noise);
    if p_clean < POWER_FLOOR {
        return Err(Error::InvalidInput(format!(
            "clean signal is silent (power {p_clean:e})"
        )));
    }
    if p_noise < POWER_FLOOR {
        return Err(Error::InvalidInput(format!(
            "noise signal is silent (power {p_noise:e})"
        )));
    }
    let alpha = (p_clean / (p_noise * 10f64.powf(target_snr_db / 10.0))).sqrt();
    let mix = clean
        .samples()
        .iter()
        .zip(&noise)
        .map(|(s, n)| s + alpha * n)
        .collect();
    Ok((Waveform::new(mix, clean.sample_rate())?, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(v: &[f64]) -> Waveform {
        Waveform::from_samples(v.to_vec()).unwrap()
    }

    #[test]
    fn equal_power_at_zero_db_gives_unit_alpha() {
        let (mix, alpha) = mix_at_snr(&wave(&[1.0, -1.0]), &wave(&[-1.0, 1.0]), 0.0).unwrap();
        assert!((alpha - 1.0).abs() < 1e-15);
        assert_eq!(mix.samples(), &[0.0, 0.0]);
    }

    #[test]
    fn ten_db_alpha() {
        let (_, alpha) = mix_at_snr(&wave(&[1.0, 1.0]), &wave(&[1.0, -1.0]), 10.0).unwrap();
        assert!((alpha - 0.316_227_766_016_837_94).abs() < 1e-15);
        let measured = 10.0 * (1.0 / (alpha * alpha)).log10();
        assert!((measured - 10.0).abs() < 1e-9);
    }

    #[test]
    fn quadruple_power_clean_gives_alpha_two() {
        let (_, alpha) = mix_at_snr(&wave(&[2.0, -2.0]), &wave(&[1.0, 1.0]), 0.0).unwrap();
        assert!((alpha - 2.0).abs() < 1e-15);
    }

    #[test]
    fn silence_is_rejected() {
        assert!(mix_at_snr(&wave(&[0.0, 0.0]), &wave(&[1.0, 1.0]), 0.0).is_err());
        assert!(mix_at_snr(&wave(&[1.0, 0.0]), &wave(&[0.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn short_noise_is_tiled() {
        assert_eq!(fit_length(&[1.0, 2.0], 5), vec![1.0, 2.0, 1.0, 2.0, 1.0]);
        assert_eq!(fit_length(&[1.0, 2.0, 3.0], 2), vec![1.0, 2.0]);
    }
}
