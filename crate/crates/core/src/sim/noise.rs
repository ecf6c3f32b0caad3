//! Noise injectors. Every injector is additive: output = input + perturbation.

use super::{DomainKind, DomainSpec, Signal1D};
use crate::error::{Error, Result};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

/// Targets at or above this are treated as "no noise": the input is
/// returned unchanged.
pub const SNR_CAP_DB: f64 = 300.0;

/// Parameters actually drawn for one sample (for the dataset log).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseDraws {
    pub snr_db: Option<f64>,
    /// (amplitude mV, frequency Hz, phase rad)
    pub lfi: Option<(f64, f64, f64)>,
    pub hfi: Option<(f64, f64, f64)>,
    pub imp_k: Option<usize>,
}

/// Adds i.i.d. Gaussian noise calibrated so the expected measured SNR
/// equals `target_snr_db`: `sigma^2 = ||s||^2 / (n * 10^(T/10))`.
pub fn add_gaussian_snr(
    s: &Signal1D,
    target_snr_db: f64,
    rng: &mut impl Rng,
) -> Result<Signal1D> {
    let power: f64 = s.samples.iter().map(|v| v * v).sum();
    if power <= 0.0 {
        return Err(Error::invalid(
            "add_gaussian_snr: zero-power signal has no defined SNR",
        ));
    }
    if target_snr_db >= SNR_CAP_DB {
        return Ok(s.clone());
    }
    let sigma = (power / (s.len() as f64 * 10f64.powf(target_snr_db / 10.0))).sqrt();
    let samples = s
        .samples
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect();
    Signal1D::new(samples, s.grid)
}

/// Adds `A * sin(2*pi*f*t + phase)` evaluated on the signal's grid.
pub fn add_sinusoid(s: &Signal1D, amp_mv: f64, freq_hz: f64, phase: f64) -> Result<Signal1D> {
    if !(amp_mv >= 0.0) {
        return Err(Error::invalid(format!(
            "add_sinusoid: amplitude {amp_mv} must be >= 0"
        )));
    }
    let samples = s
        .samples
        .iter()
        .enumerate()
        .map(|(i, &v)| v + amp_mv * (std::f64::consts::TAU * freq_hz * s.grid.time(i) + phase).sin())
        .collect();
    Signal1D::new(samples, s.grid)
}

/// Adds spikes at exactly `k` distinct sample positions; each spike
/// amplitude is drawn uniformly from `amp_range` with a random sign.
pub fn add_impulses(
    s: &Signal1D,
    k: usize,
    amp_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Signal1D> {
    if k > s.len() {
        return Err(Error::invalid(format!(
            "add_impulses: k = {k} exceeds signal length {}",
            s.len()
        )));
    }
    let mut samples = s.samples.clone();
    for i in index::sample(rng, s.len(), k).iter() {
        let amp = rng.random_range(amp_range.0..=amp_range.1);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        samples[i] += sign * amp;
    }
    Signal1D::new(samples, s.grid)
}

/// Compound interference: AGN -> LFI -> HFI -> IMP in that fixed order, with
/// parameters drawn sequentially from `rng` immediately before each stage.
pub fn compose_cmp(
    s: &Signal1D,
    spec: &DomainSpec,
    rng: &mut impl Rng,
) -> Result<(Signal1D, NoiseDraws)> {
    if spec.kind != DomainKind::Cmp {
        return Err(Error::invalid(format!(
            "compose_cmp: spec kind is {:?}, not Cmp",
            spec.kind
        )));
    }
    let mut draws = NoiseDraws::default();
    let mut out = s.clone();
    if let Some((lo, hi)) = spec.snr_db {
        let t = rng.random_range(lo..=hi);
        draws.snr_db = Some(t);
        out = add_gaussian_snr(&out, t, rng)?;
    }
    if let Some(tone) = spec.lfi {
        let d = draw_tone(&tone, rng);
        draws.lfi = Some(d);
        out = add_sinusoid(&out, d.0, d.1, d.2)?;
    }
    if let Some(tone) = spec.hfi {
        let d = draw_tone(&tone, rng);
        draws.hfi = Some(d);
        out = add_sinusoid(&out, d.0, d.1, d.2)?;
    }
    if let Some(imp) = spec.imp {
        let k = rng.random_range(imp.count.0..=imp.count.1);
        draws.imp_k = Some(k);
        out = add_impulses(&out, k, imp.amp_mv, rng)?;
    }
    Ok((out, draws))
}

fn draw_tone(t: &super::ToneRange, rng: &mut impl Rng) -> (f64, f64, f64) {
    (
        rng.random_range(t.amp_mv.0..=t.amp_mv.1),
        rng.random_range(t.freq_hz.0..=t.freq_hz.1),
        rng.random_range(t.phase.0..=t.phase.1),
    )
}

/// Applies the noise a domain calls for and reports what was drawn.
pub fn apply_noise(
    s: &Signal1D,
    spec: &DomainSpec,
    rng: &mut impl Rng,
) -> Result<(Signal1D, NoiseDraws)> {
    let mut draws = NoiseDraws::default();
    match spec.kind {
        DomainKind::Source | DomainKind::Agn => {
            let (lo, hi) = spec
                .snr_db
                .ok_or_else(|| Error::invalid("gaussian domain without SNR range"))?;
            let t = rng.random_range(lo..=hi);
            draws.snr_db = Some(t);
            Ok((add_gaussian_snr(s, t, rng)?, draws))
        }
        DomainKind::Lfi | DomainKind::Hfi => {
            let tone = if spec.kind == DomainKind::Lfi {
                spec.lfi
            } else {
                spec.hfi
            }
            .ok_or_else(|| Error::invalid("tone domain without tone ranges"))?;
            let d = draw_tone(&tone, rng);
            if spec.kind == DomainKind::Lfi {
                draws.lfi = Some(d);
            } else {
                draws.hfi = Some(d);
            }
            Ok((add_sinusoid(s, d.0, d.1, d.2)?, draws))
        }
        DomainKind::Imp => {
            let imp = spec
                .imp
                .ok_or_else(|| Error::invalid("impulse domain without impulse ranges"))?;
            let k = rng.random_range(imp.count.0..=imp.count.1);
            draws.imp_k = Some(k);
            Ok((add_impulses(s, k, imp.amp_mv, rng)?, draws))
        }
        DomainKind::Cmp => compose_cmp(s, spec, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::metrics::snr;
    use crate::rng::{stream, Ns};
    use crate::sim::{clean_signal, DomainSpec, SignalParams, TimeGrid};

    fn fig3a() -> Signal1D {
        clean_signal(
            &SignalParams {
                q1: 1300.0,
                q2: 2.5,
                b: 4.0,
                terms: 1,
            },
            &TimeGrid::standard(),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_injection_is_calibrated() {
        let s = fig3a();
        for &target in &[5.0, 10.0, 22.0, 30.0] {
            let mut mean = 0.0;
            let mut rng = stream(1, Ns::Sample, target as u64);
            for _ in 0..200 {
                let noisy = add_gaussian_snr(&s, target, &mut rng).unwrap();
                mean += snr(&s.samples, &noisy.samples).unwrap();
            }
            mean /= 200.0;
            assert!(
                (mean - target).abs() < 0.3,
                "target {target} dB, mean measured {mean} dB"
            );
        }
    }

    #[test]
    fn gaussian_noise_matches_declared_moments() {
        let s = fig3a();
        let target = 15.0;
        let mut rng = stream(2, Ns::Sample, 0);
        let noisy = add_gaussian_snr(&s, target, &mut rng).unwrap();
        let eps: Vec<f64> = noisy
            .samples
            .iter()
            .zip(s.samples.iter())
            .map(|(n, c)| n - c)
            .collect();
        let power: f64 = s.samples.iter().map(|v| v * v).sum();
        let want_var = power / (900.0 * 10f64.powf(target / 10.0));
        let mean = eps.iter().sum::<f64>() / 900.0;
        let var = eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / 899.0;
        assert!(mean.abs() < 4.0 * (want_var / 900.0).sqrt(), "mean {mean}");
        assert!((var / want_var - 1.0).abs() < 0.2, "var ratio {}", var / want_var);
    }

    #[test]
    fn snr_cap_returns_input_unchanged() {
        let s = fig3a();
        let mut rng = stream(3, Ns::Sample, 0);
        let out = add_gaussian_snr(&s, 300.0, &mut rng).unwrap();
        assert_eq!(out.samples, s.samples);
    }

    #[test]
    fn zero_power_signal_is_rejected() {
        let s = Signal1D::new(vec![0.0; 900], TimeGrid::standard()).unwrap();
        let mut rng = stream(4, Ns::Sample, 0);
        assert!(add_gaussian_snr(&s, 20.0, &mut rng).is_err());
    }

    #[test]
    fn sinusoid_zero_amp_is_identity_and_bounded_otherwise() {
        let s = fig3a();
        assert_eq!(add_sinusoid(&s, 0.0, 3.0, 0.4).unwrap().samples, s.samples);
        let out = add_sinusoid(&s, 30.0, 1.5, 0.0).unwrap();
        let max_dev = out
            .samples
            .iter()
            .zip(s.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_dev <= 30.0 + 1e-9);
        assert!(max_dev > 25.0, "a 1.5 Hz tone over 3.6 s should come near its peak");
    }

    #[test]
    fn impulses_touch_exactly_k_samples() {
        let s = fig3a();
        for trial in 0..50 {
            let mut rng = stream(5, Ns::Sample, trial);
            let k = 20 + (trial as usize % 11);
            let out = add_impulses(&s, k, (50.0, 70.0), &mut rng).unwrap();
            let diffs: Vec<f64> = out
                .samples
                .iter()
                .zip(s.samples.iter())
                .map(|(a, b)| a - b)
                .filter(|d| *d != 0.0)
                .collect();
            assert_eq!(diffs.len(), k);
            for d in diffs {
                assert!((50.0..=70.0).contains(&d.abs()), "spike magnitude {d}");
            }
        }
        let mut rng = stream(5, Ns::Sample, 99);
        assert_eq!(add_impulses(&s, 0, (50.0, 70.0), &mut rng).unwrap().samples, s.samples);
        assert!(add_impulses(&s, 901, (50.0, 70.0), &mut rng).is_err());
    }

    // Chaining the four injectors by hand on a clone of the same rng stream
    // must reproduce compose_cmp exactly.
    #[test]
    fn cmp_equals_manual_chaining() {
        let s = fig3a();
        let spec = DomainSpec::default_for(DomainKind::Cmp);
        let mut rng = stream(6, Ns::Sample, 0);
        let (composed, draws) = compose_cmp(&s, &spec, &mut rng).unwrap();

        let mut rng2 = stream(6, Ns::Sample, 0);
        let t = rng2.random_range(8.0..=10.0);
        let step1 = add_gaussian_snr(&s, t, &mut rng2).unwrap();
        let tone = spec.lfi.unwrap();
        let (a, f, p) = (
            rng2.random_range(tone.amp_mv.0..=tone.amp_mv.1),
            rng2.random_range(tone.freq_hz.0..=tone.freq_hz.1),
            rng2.random_range(tone.phase.0..=tone.phase.1),
        );
        let step2 = add_sinusoid(&step1, a, f, p).unwrap();
        let tone = spec.hfi.unwrap();
        let (a2, f2, p2) = (
            rng2.random_range(tone.amp_mv.0..=tone.amp_mv.1),
            rng2.random_range(tone.freq_hz.0..=tone.freq_hz.1),
            rng2.random_range(tone.phase.0..=tone.phase.1),
        );
        let step3 = add_sinusoid(&step2, a2, f2, p2).unwrap();
        let k = rng2.random_range(20..=30usize);
        let step4 = add_impulses(&step3, k, (50.0, 70.0), &mut rng2).unwrap();

        assert_eq!(composed.samples, step4.samples);
        assert_eq!(draws.snr_db, Some(t));
        assert_eq!(draws.lfi, Some((a, f, p)));
        assert_eq!(draws.imp_k, Some(k));
    }

    // With every stage neutralized (capped SNR, zero tone amplitudes, zero
    // spikes) the compound injector is the identity.
    #[test]
    fn cmp_with_neutral_ranges_is_identity() {
        let s = fig3a();
        let mut spec = DomainSpec::default_for(DomainKind::Cmp);
        spec.snr_db = Some((300.0, 300.0));
        let mut t = spec.lfi.unwrap();
        t.amp_mv = (0.0, 0.0);
        spec.lfi = Some(t);
        let mut t = spec.hfi.unwrap();
        t.amp_mv = (0.0, 0.0);
        spec.hfi = Some(t);
        let mut i = spec.imp.unwrap();
        i.count = (0, 0);
        spec.imp = Some(i);
        let mut rng = stream(7, Ns::Sample, 0);
        let (out, _) = compose_cmp(&s, &spec, &mut rng).unwrap();
        assert_eq!(out.samples, s.samples);
    }
}
