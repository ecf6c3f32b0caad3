//! Scalar evaluation metrics.

use crate::error::{Error, Result};

/// Perfect reconstructions report this instead of +inf.
pub const SNR_CAP_DB: f64 = 300.0;

/// Signal-to-noise ratio in dB of an estimate against ground truth:
/// `10*log10(||clean||^2 / ||est - clean||^2)`, capped at 300 dB for exact
/// matches. Errors on zero-power clean signals.
pub fn snr(clean: &[f64], est: &[f64]) -> Result<f64> {
    if clean.len() != est.len() {
        return Err(Error::invalid(format!(
            "snr: length mismatch {} vs {}",
            clean.len(),
            est.len()
        )));
    }
    let mut sig = 0.0f64;
    let mut err = 0.0f64;
    for (&c, &e) in clean.iter().zip(est.iter()) {
        sig += c * c;
        let d = e - c;
        err += d * d;
    }
    if sig <= 0.0 {
        return Err(Error::invalid("snr: zero-power reference signal"));
    }
    if err == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).min(SNR_CAP_DB))
}

/// Mean absolute first difference — the smoothness diagnostic:
/// `mean_i |s[i+1] - s[i]|`. Errors on signals shorter than 2 samples.
pub fn mean_abs_first_diff(s: &[f64]) -> Result<f64> {
    if s.len() < 2 {
        return Err(Error::invalid(format!(
            "mean_abs_first_diff: need >= 2 samples, got {}",
            s.len()
        )));
    }
    let mut acc = 0.0f64;
    for w in s.windows(2) {
        acc += (w[1] - w[0]).abs();
    }
    Ok(acc / (s.len() - 1) as f64)
}

/// Convenience: f32 rows (dataset storage) against f64 math.
pub fn snr_f32(clean: &[f32], est: &[f32]) -> Result<f64> {
    let c: Vec<f64> = clean.iter().map(|&v| v as f64).collect();
    let e: Vec<f64> = est.iter().map(|&v| v as f64).collect();
    snr(&c, &e)
}
