//! Source-free test-time adaptation.
//!
//! Each incoming batch gets its own throwaway copy of the trained
//! parameters. The batch and a Gaussian-perturbed copy of it run through the
//! network together, three self-supervised consistency losses couple the two
//! views, and a single fresh-state Adam step moves the copy. The adapted
//! output is a fresh forward pass of the unperturbed batch under the updated
//! parameters; the master checkpoint is never touched, so batches are
//! independent and order-free.
//!
//! The three losses compare, between the two views: the denoised outputs
//! (mean square), the predicted sparse codes (mean absolute), and — the
//! dictionary-prior term — the first-order variation of the normal view's
//! dictionary reconstruction against that of the perturbed view's denoised
//! output (mean square). The total is
//! `beta1 * (L_sparse + L_oov) + beta2 * L_den`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dict::Dictionary;
use crate::error::{Error, Result};
use crate::net::{
    build_forward, merge_param_grads, AdamState, Checkpoint, ForwardOut, GraphOut,
};
use crate::report::metrics::snr_f32;
use crate::rng::{stream, Ns};
use crate::sim::Dataset;
use crate::tensor::{BufId, ParamSet, Real, Tape, Tensor4};

/// Header line identifying the adaptation report CSV layout.
pub const TTA_CSV_SCHEMA: &str = "# schema: tta-report/1";

/// Adaptation hyperparameters.
///
/// `aug_noise_std` is the perturbation's standard deviation in raw mV,
/// applied before input normalization. The per-loss switches select which
/// terms enter the optimized total; disabled terms are still measured and
/// reported. With every switch off (or `lr = 0`) adaptation is an exact
/// no-op.
#[derive(Clone, Debug, PartialEq)]
pub struct TTAConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub batch: usize,
    pub aug_noise_std: f64,
    pub reset_per_batch: bool,
    pub use_den: bool,
    pub use_sparse: bool,
    pub use_oov: bool,
}

impl Default for TTAConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            lr: 1e-5,
            batch: 128,
            aug_noise_std: 120.0,
            reset_per_batch: true,
            use_den: true,
            use_sparse: true,
            use_oov: true,
        }
    }
}

impl TTAConfig {
    /// The default config restricted to a subset of the three losses.
    pub fn with_losses(den: bool, sparse: bool, oov: bool) -> Self {
        Self { use_den: den, use_sparse: sparse, use_oov: oov, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0) || !(self.beta2 >= 0.0) {
            return Err(Error::invalid("beta1 and beta2 must be >= 0"));
        }
        if !self.beta1.is_finite() || !self.beta2.is_finite() {
            return Err(Error::invalid("beta1 and beta2 must be finite"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr must be finite and >= 0"));
        }
        if !(self.aug_noise_std >= 0.0) || !self.aug_noise_std.is_finite() {
            return Err(Error::invalid("aug_noise_std must be finite and >= 0"));
        }
        if !self.reset_per_batch {
            return Err(Error::invalid(
                "continual adaptation (reset_per_batch = false) is not supported",
            ));
        }
        Ok(())
    }
}

/// One report row per adapted batch. SNR fields are present only when the
/// dataset carries clean references.
#[derive(Clone, Debug, PartialEq)]
pub struct TTARow {
    pub batch_idx: usize,
    pub l_den: f64,
    pub l_sparse: f64,
    pub l_oov: f64,
    pub total: f64,
    pub snr_pre: Option<f64>,
    pub snr_post: Option<f64>,
    pub param_delta_l2: f64,
    pub fallback: bool,
}

/// Per-batch rows plus signal-level SNR means over the whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TTAReport {
    pub rows: Vec<TTARow>,
    pub n_signals: usize,
    pub mean_snr_pre: Option<f64>,
    pub mean_snr_post: Option<f64>,
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TTAReport {
    /// Mean adapted-minus-source SNR gain in dB, when references exist.
    pub fn gain_db(&self) -> Option<f64> {
        Some(self.mean_snr_post? - self.mean_snr_pre?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(TTA_CSV_SCHEMA);
        out.push('\n');
        out.push_str(
            "batch_idx,L_den,L_sparse,L_oov,total,snr_pre,snr_post,param_delta_l2,fallback_flag\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.batch_idx,
                r.l_den,
                r.l_sparse,
                r.l_oov,
                r.total,
                csv_opt(r.snr_pre),
                csv_opt(r.snr_post),
                r.param_delta_l2,
                r.fallback as u8
            ));
        }
        out
    }
}

/// Everything produced by adapting one batch. `denoised` and
/// `source_denoised` are `(B,1,S,S)` in raw mV; `adapted_params` is the
/// post-step parameter copy (equal to the master's under a fallback).
pub struct BatchOutcome {
    pub denoised: Tensor4<f32>,
    pub source_denoised: Tensor4<f32>,
    pub adapted_params: ParamSet<f32>,
    pub row: TTARow,
}

/// Adapted and source outputs for a whole dataset, flattened row-major
/// (`n` signals by 900 samples, raw mV).
pub struct AdaptOutcome {
    pub report: TTAReport,
    pub denoised: Vec<f32>,
    pub source_denoised: Vec<f32>,
}

// ---------------------------------------------------------------------------
// Pieces
// ---------------------------------------------------------------------------

/// Adds i.i.d. `N(0, std^2)` to every element (raw-unit domain). A zero
/// `std` returns the input unchanged without consuming the generator.
pub fn augment(x: &Tensor4<f32>, std: f64, rng: &mut impl Rng) -> Result<Tensor4<f32>> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid("augment: std must be finite and >= 0"));
    }
    if std == 0.0 {
        return Ok(x.clone());
    }
    let dist = Normal::new(0.0, std).expect("validated std");
    let data = x.data().iter().map(|&v| v + dist.sample(rng) as f32).collect();
    Tensor4::from_vec(x.shape(), data)
}

/// Forward first difference: `d[i] = s[i+1] - s[i]`.
pub fn first_diff(s: &[f64]) -> Result<Vec<f64>> {
    if s.len() < 2 {
        return Err(Error::invalid(format!(
            "first_diff: need >= 2 samples, got {}",
            s.len()
        )));
    }
    Ok(s.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Tape nodes of the adaptation losses.
pub struct TtaGraph {
    pub total: BufId,
    pub l_den: BufId,
    pub l_sparse: BufId,
    pub l_oov: BufId,
}

/// Attaches the three consistency losses between a normal-view and an
/// augmented-view forward graph, plus their enabled weighted total.
pub fn build_tta_loss<T: Real>(
    tape: &mut Tape<T>,
    g_norm: &GraphOut,
    g_aug: &GraphOut,
    cfg: &TTAConfig,
) -> Result<TtaGraph> {
    cfg.validate()?;
    let den_shape = tape.shape(g_norm.denoised);
    let code_shape = tape.shape(g_norm.code);
    let (b, w) = (den_shape[0], den_shape[2] * den_shape[3]);

    let l_den = tape.sq_loss(g_norm.denoised, g_aug.denoised, 1.0 / (b * w) as f64)?;
    let l_sparse =
        tape.abs_loss(g_norm.code, g_aug.code, 1.0 / (b * code_shape[1]) as f64)?;

    let d1 = tape.first_diff(g_norm.dict_recon)?;
    let y2_flat = tape.reshape(g_aug.denoised, [b, w, 1, 1])?;
    let d2 = tape.first_diff(y2_flat)?;
    let l_oov = tape.sq_loss(d1, d2, 1.0 / (b * (w - 1)) as f64)?;

    let mut terms = Vec::new();
    if cfg.use_sparse {
        terms.push((l_sparse, cfg.beta1));
    }
    if cfg.use_oov {
        terms.push((l_oov, cfg.beta1));
    }
    if cfg.use_den {
        terms.push((l_den, cfg.beta2));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(TtaGraph { total, l_den, l_sparse, l_oov })
}

/// Value-level adaptation loss between two already-computed forward outputs,
/// in the units of its arguments. Returns `(total, L_den, L_sparse, L_oov)`.
pub fn tta_loss(
    out_norm: &ForwardOut,
    out_aug: &ForwardOut,
    cfg: &TTAConfig,
) -> Result<(f64, f64, f64, f64)> {
    cfg.validate()?;
    if out_norm.denoised.shape() != out_aug.denoised.shape()
        || out_norm.code.shape() != out_aug.code.shape()
    {
        return Err(Error::invalid("tta_loss: view shapes differ"));
    }
    let ds = out_norm.denoised.shape();
    let (b, w) = (ds[0], ds[1] * ds[2] * ds[3]);
    if out_norm.dict_recon.shape() != [b, w, 1, 1] {
        return Err(Error::invalid(
            "tta_loss: dictionary reconstruction does not match the denoised length",
        ));
    }
    if w < 2 {
        return Err(Error::invalid("tta_loss: signals must have >= 2 samples"));
    }

    let mean_sq = |a: &[f32], c: &[f32]| {
        a.iter()
            .zip(c)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            / a.len() as f64
    };
    let l_den = mean_sq(out_norm.denoised.data(), out_aug.denoised.data());
    let l_sparse = out_norm
        .code
        .data()
        .iter()
        .zip(out_aug.code.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / out_norm.code.len() as f64;

    let mut acc = 0.0f64;
    for s in 0..b {
        let d1 = &out_norm.dict_recon.data()[s * w..(s + 1) * w];
        let y2 = &out_aug.denoised.data()[s * w..(s + 1) * w];
        for i in 0..w - 1 {
            let g1 = d1[i + 1] as f64 - d1[i] as f64;
            let g2 = y2[i + 1] as f64 - y2[i] as f64;
            acc += (g1 - g2) * (g1 - g2);
        }
    }
    let l_oov = acc / (b * (w - 1)) as f64;

    let mut total = 0.0;
    if cfg.use_sparse {
        total += cfg.beta1 * l_sparse;
    }
    if cfg.use_oov {
        total += cfg.beta1 * l_oov;
    }
    if cfg.use_den {
        total += cfg.beta2 * l_den;
    }
    Ok((total, l_den, l_sparse, l_oov))
}

// ---------------------------------------------------------------------------
// Adaptation
// ---------------------------------------------------------------------------

struct TwoViewEval {
    l_den: f64,
    l_sparse: f64,
    l_oov: f64,
    total: f64,
    norm_denoised: Vec<f32>,
    grads: Option<Vec<(usize, Vec<f32>)>>,
}

/// Runs both views through `params` on one tape; optionally backprops the
/// enabled total.
fn eval_two_views(
    params: &ParamSet<f32>,
    ckpt: &Checkpoint,
    atoms: &Arc<Vec<f32>>,
    xn: &[f32],
    xa: &[f32],
    shape: [usize; 4],
    cfg: &TTAConfig,
    want_grads: bool,
) -> Result<TwoViewEval> {
    let mut tape = Tape::new();
    let xb = tape.leaf(xn.to_vec(), shape)?;
    let ab = tape.leaf(xa.to_vec(), shape)?;
    let g_norm = build_forward(&mut tape, params, &ckpt.cfg, xb, atoms)?;
    let g_aug = build_forward(&mut tape, params, &ckpt.cfg, ab, atoms)?;
    let graph = build_tta_loss(&mut tape, &g_norm, &g_aug, cfg)?;
    let norm_denoised = tape.value(g_norm.denoised).to_vec();
    let (l_den, l_sparse, l_oov, total) = (
        tape.scalar(graph.l_den) as f64,
        tape.scalar(graph.l_sparse) as f64,
        tape.scalar(graph.l_oov) as f64,
        tape.scalar(graph.total) as f64,
    );
    let grads = if want_grads {
        tape.backward(graph.total)?;
        Some(merge_param_grads(params.len(), tape.param_grads()))
    } else {
        None
    };
    Ok(TwoViewEval { l_den, l_sparse, l_oov, total, norm_denoised, grads })
}

/// Re-evaluates the adaptation losses for `(x, x_aug)` under an arbitrary
/// parameter copy (no update). Used to audit that the one step descended.
pub fn tta_loss_at(
    params: &ParamSet<f32>,
    ckpt: &Checkpoint,
    dict: &Dictionary,
    x_raw: &Tensor4<f32>,
    x_aug_raw: &Tensor4<f32>,
    cfg: &TTAConfig,
) -> Result<(f64, f64, f64, f64)> {
    ckpt.check_dict(dict)?;
    let scale = ckpt.cfg.norm_scale as f32;
    let xn: Vec<f32> = x_raw.data().iter().map(|&v| v * scale).collect();
    let xa: Vec<f32> = x_aug_raw.data().iter().map(|&v| v * scale).collect();
    let atoms = Arc::new(dict.atoms().to_vec());
    let e = eval_two_views(params, ckpt, &atoms, &xn, &xa, x_raw.shape(), cfg, false)?;
    Ok((e.total, e.l_den, e.l_sparse, e.l_oov))
}

fn mean_batch_snr(clean: &Tensor4<f32>, est: &Tensor4<f32>, w: usize) -> Result<f64> {
    let b = clean.shape()[0];
    let mut acc = 0.0;
    for s in 0..b {
        acc += snr_f32(&clean.data()[s * w..(s + 1) * w], &est.data()[s * w..(s + 1) * w])?;
    }
    Ok(acc / b as f64)
}

/// Adapts one batch and reports on it.
///
/// `x_raw` is `(B,1,S,S)` noisy input in raw mV; `clean_raw`, when present,
/// enables the SNR columns. The perturbation stream is keyed by
/// `(seed, batch_idx)`, so the outcome is independent of processing order.
/// A numeric failure during adaptation (or in the adapted forward) is
/// reported via `row.fallback` and returns the source output unchanged.
pub fn adapt_batch(
    ckpt: &Checkpoint,
    dict: &Dictionary,
    x_raw: &Tensor4<f32>,
    clean_raw: Option<&Tensor4<f32>>,
    cfg: &TTAConfig,
    seed: u64,
    batch_idx: u64,
) -> Result<BatchOutcome> {
    cfg.validate()?;
    ckpt.check_dict(dict)?;
    let side = ckpt.cfg.input_side;
    let shape = x_raw.shape();
    if shape[1] != 1 || shape[2] != side || shape[3] != side {
        return Err(Error::invalid(format!(
            "adapt_batch: input shape {shape:?} does not match (B,1,{side},{side})"
        )));
    }
    if let Some(c) = clean_raw {
        if c.shape() != shape {
            return Err(Error::invalid("adapt_batch: clean batch shape differs from input"));
        }
    }
    if dict.atom_len() != side * side {
        return Err(Error::invalid("adapt_batch: dictionary atom length mismatch"));
    }

    let mut rng = stream(seed, Ns::TtaAugment, batch_idx);
    let x_aug = augment(x_raw, cfg.aug_noise_std, &mut rng)?;
    let scale = ckpt.cfg.norm_scale as f32;
    let inv = 1.0 / scale;
    let xn: Vec<f32> = x_raw.data().iter().map(|&v| v * scale).collect();
    let xa: Vec<f32> = x_aug.data().iter().map(|&v| v * scale).collect();
    let atoms = Arc::new(dict.atoms().to_vec());

    // The update step, isolated so any numeric failure inside falls back to
    // the unadapted model instead of poisoning the whole run.
    let adapt = || -> Result<(ParamSet<f32>, Vec<f32>, (f64, f64, f64, f64))> {
        let mut theta = ckpt.params.clone();
        let e = eval_two_views(&theta, ckpt, &atoms, &xn, &xa, shape, cfg, true)?;
        if !e.total.is_finite() {
            return Err(Error::numeric(format!("adaptation loss is {}", e.total)));
        }
        let grads = e.grads.expect("requested gradients");
        let mut adam = AdamState::new(&theta);
        adam.step(&mut theta, &grads, cfg.lr);

        // Final output: the unperturbed input under the updated parameters.
        let mut tape = Tape::new();
        let xb = tape.leaf(xn.clone(), shape)?;
        let g = build_forward(&mut tape, &theta, &ckpt.cfg, xb, &atoms)?;
        let denoised = tape.value(g.denoised).to_vec();
        Ok((theta, denoised, (e.total, e.l_den, e.l_sparse, e.l_oov)))
    };

    let w = side * side;
    let to_raw = |norm: Vec<f32>| -> Result<Tensor4<f32>> {
        Tensor4::from_vec(shape, norm.into_iter().map(|v| v * inv).collect())
    };

    let (adapted_params, adapted_norm, losses, source_norm, fallback) = match adapt() {
        Ok((theta, denoised, losses)) => {
            // The pre-update normal-view output doubles as the source
            // baseline; recompute it cheaply from the master parameters.
            let e = eval_two_views(&ckpt.params, ckpt, &atoms, &xn, &xn, shape, cfg, false)?;
            (theta, denoised, losses, e.norm_denoised, false)
        }
        Err(Error::Numeric(_)) => {
            let e = eval_two_views(&ckpt.params, ckpt, &atoms, &xn, &xn, shape, cfg, false)?;
            let losses = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
            (ckpt.params.clone(), e.norm_denoised.clone(), losses, e.norm_denoised, true)
        }
        Err(e) => return Err(e),
    };

    let source_denoised = to_raw(source_norm)?;
    let denoised = to_raw(adapted_norm)?;
    let (snr_pre, snr_post) = match clean_raw {
        Some(c) => (
            Some(mean_batch_snr(c, &source_denoised, w)?),
            Some(mean_batch_snr(c, &denoised, w)?),
        ),
        None => (None, None),
    };
    let row = TTARow {
        batch_idx: batch_idx as usize,
        l_den: losses.1,
        l_sparse: losses.2,
        l_oov: losses.3,
        total: losses.0,
        snr_pre,
        snr_post,
        param_delta_l2: adapted_params.delta_l2(&ckpt.params),
        fallback,
    };
    Ok(BatchOutcome { denoised, source_denoised, adapted_params, row })
}

fn dataset_batch(
    data: &Dataset,
    rows: &[usize],
    side: usize,
    clean: bool,
) -> Result<Tensor4<f32>> {
    crate::net::batch_images(data, rows, side, 1.0, clean)
}

/// Adapts every batch of a dataset independently and aggregates the report.
///
/// Signals are chunked in row order into `ceil(n / batch)` batches. The
/// dataset-level SNR means are per-signal means (not means of batch means),
/// present only when clean references exist.
pub fn adapt_dataset(
    ckpt: &Checkpoint,
    data: &Dataset,
    dict: &Dictionary,
    cfg: &TTAConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if data.n == 0 {
        return Err(Error::invalid("adapt_dataset: empty dataset"));
    }
    let side = ckpt.cfg.input_side;
    let w = side * side;
    let has_clean = data.clean.is_some();
    let all_rows: Vec<usize> = (0..data.n).collect();

    let mut rows_out = Vec::new();
    let mut denoised = Vec::with_capacity(data.n * w);
    let mut source_denoised = Vec::with_capacity(data.n * w);
    for (bi, chunk) in all_rows.chunks(cfg.batch).enumerate() {
        let x = dataset_batch(data, chunk, side, false)?;
        let clean = if has_clean {
            Some(dataset_batch(data, chunk, side, true)?)
        } else {
            None
        };
        let out = adapt_batch(ckpt, dict, &x, clean.as_ref(), cfg, seed, bi as u64)?;
        denoised.extend_from_slice(out.denoised.data());
        source_denoised.extend_from_slice(out.source_denoised.data());
        rows_out.push(out.row);
    }

    let (mean_snr_pre, mean_snr_post) = if has_clean {
        let mut pre = 0.0;
        let mut post = 0.0;
        for (i, _) in all_rows.iter().enumerate() {
            let c = data.clean_row(i).expect("clean present");
            pre += snr_f32(c, &source_denoised[i * w..(i + 1) * w])?;
            post += snr_f32(c, &denoised[i * w..(i + 1) * w])?;
        }
        (Some(pre / data.n as f64), Some(post / data.n as f64))
    } else {
        (None, None)
    };

    Ok(AdaptOutcome {
        report: TTAReport { rows: rows_out, n_signals: data.n, mean_snr_pre, mean_snr_post },
        denoised,
        source_denoised,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dict::{learn_dictionary, DictLearnConfig};
    use crate::net::{init_params, NetConfig};
    use crate::sim::{make_dataset, DomainKind, DomainSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_world(n: usize) -> (Dataset, Dictionary, Checkpoint) {
        let data = make_dataset(&DomainSpec::default_for(DomainKind::Agn), n, 123).unwrap();
        let clean_norm: Vec<f32> =
            data.clean.as_ref().unwrap().iter().map(|&v| v * 1e-3).collect();
        let dcfg = DictLearnConfig {
            k: 3,
            epochs: 2,
            max_iters: 60,
            tol: 1e-8,
            enforce_capacity: false,
            ..DictLearnConfig::default()
        };
        let (dict, _, _) = learn_dictionary(&clean_norm, n, 900, &dcfg).unwrap();
        let cfg = NetConfig { width_mult: 0.125, k: 3, ..NetConfig::default() };
        let ckpt = Checkpoint {
            cfg: cfg.clone(),
            params: init_params(&cfg, 9).unwrap(),
            dict_hash: dict.source_hash,
            train_log: Vec::new(),
            seed: 9,
        };
        (data, dict, ckpt)
    }

    fn batch_tensor(data: &Dataset, rows: &[usize], clean: bool) -> Tensor4<f32> {
        dataset_batch(data, rows, 30, clean).unwrap()
    }

    #[test]
    fn first_diff_closed_forms() {
        assert_eq!(first_diff(&[1.0, 3.0, 6.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(first_diff(&[5.0, 5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        let ramp: Vec<f64> = (0..10).map(|i| 0.25 * i as f64).collect();
        assert!(first_diff(&ramp).unwrap().iter().all(|&d| d == 0.25));
        assert!(first_diff(&[1.0]).is_err());
    }

    #[test]
    fn augment_zero_std_is_identity_and_seeded() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, -2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let same = augment(&x, 0.0, &mut rng).unwrap();
        assert_eq!(same.data(), x.data());

        let mut r1 = ChaCha8Rng::seed_from_u64(6);
        let mut r2 = ChaCha8Rng::seed_from_u64(6);
        let a = augment(&x, 50.0, &mut r1).unwrap();
        let b = augment(&x, 50.0, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), x.data());
    }

    #[test]
    fn augment_moment_matches_std() {
        let n = 200_000;
        let x = Tensor4::zeros([1, 1, 1, n]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = augment(&x, 120.0, &mut rng).unwrap();
        let mean = a.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var =
            a.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        assert!((std - 120.0).abs() < 2.0, "sample std {std}");
    }

    #[test]
    fn tta_loss_closed_form_offsets() {
        // Augmented denoised = normal + 0.125 everywhere; codes equal; the
        // reconstruction shares the augmented output's first differences.
        // Exactly representable offsets make every term exact.
        let y1 = Tensor4::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 4.0, 8.0]).unwrap();
        let y2 = Tensor4::from_vec([1, 1, 2, 2], vec![1.125f32, 2.125, 4.125, 8.125]).unwrap();
        let code = Tensor4::from_vec([1, 2, 1, 1], vec![0.5f32, -0.25]).unwrap();
        let d1 = Tensor4::from_vec([1, 4, 1, 1], vec![11.125f32, 12.125, 14.125, 18.125]).unwrap();
        let out_norm = ForwardOut { denoised: y1, code: code.clone(), dict_recon: d1.clone() };
        let out_aug = ForwardOut { denoised: y2, code, dict_recon: d1 };
        let cfg = TTAConfig { beta1: 3.0, beta2: 2.0, ..TTAConfig::default() };
        let (total, l_den, l_sparse, l_oov) = tta_loss(&out_norm, &out_aug, &cfg).unwrap();
        assert_eq!(l_den, 0.015625);
        assert_eq!(l_sparse, 0.0);
        assert_eq!(l_oov, 0.0);
        assert_eq!(total, 2.0 * 0.015625);
    }

    #[test]
    fn zero_augmentation_zeroes_den_and_sparse_only() {
        let (data, dict, ckpt) = tiny_world(4);
        let x = batch_tensor(&data, &[0, 1, 2, 3], false);
        let cfg = TTAConfig { aug_noise_std: 0.0, ..TTAConfig::default() };
        let out = adapt_batch(&ckpt, &dict, &x, None, &cfg, 1, 0).unwrap();
        assert_eq!(out.row.l_den, 0.0);
        assert_eq!(out.row.l_sparse, 0.0);
        assert!(out.row.l_oov > 0.0, "the two heads still disagree");
        assert!(!out.row.fallback);
    }

    #[test]
    fn zero_lr_adaptation_is_bitwise_noop() {
        let (data, dict, ckpt) = tiny_world(4);
        let x = batch_tensor(&data, &[0, 1, 2, 3], false);
        let clean = batch_tensor(&data, &[0, 1, 2, 3], true);
        let cfg = TTAConfig { lr: 0.0, ..TTAConfig::default() };
        let out = adapt_batch(&ckpt, &dict, &x, Some(&clean), &cfg, 1, 0).unwrap();
        let a: Vec<u32> = out.denoised.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = out.source_denoised.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(out.row.param_delta_l2, 0.0);
        assert_eq!(out.row.snr_pre, out.row.snr_post);
    }

    #[test]
    fn zero_betas_are_an_exact_noop() {
        let (data, dict, ckpt) = tiny_world(4);
        let x = batch_tensor(&data, &[0, 1, 2, 3], false);
        let cfg = TTAConfig { beta1: 0.0, beta2: 0.0, ..TTAConfig::default() };
        let out = adapt_batch(&ckpt, &dict, &x, None, &cfg, 1, 0).unwrap();
        assert_eq!(out.row.total, 0.0);
        assert_eq!(out.row.param_delta_l2, 0.0);
        assert_eq!(out.denoised.data(), out.source_denoised.data());
    }

    #[test]
    fn empty_loss_subset_is_an_exact_noop() {
        let (data, dict, ckpt) = tiny_world(4);
        let x = batch_tensor(&data, &[0, 1, 2, 3], false);
        let cfg = TTAConfig::with_losses(false, false, false);
        let out = adapt_batch(&ckpt, &dict, &x, None, &cfg, 1, 0).unwrap();
        assert_eq!(out.row.total, 0.0);
        assert!(out.row.l_oov > 0.0, "disabled losses are still measured");
        assert_eq!(out.row.param_delta_l2, 0.0);
        assert_eq!(out.denoised.data(), out.source_denoised.data());
    }

    #[test]
    fn batches_are_order_independent() {
        let (data, dict, ckpt) = tiny_world(8);
        let b0 = batch_tensor(&data, &[0, 1, 2, 3], false);
        let b1 = batch_tensor(&data, &[4, 5, 6, 7], false);
        let cfg = TTAConfig { batch: 4, ..TTAConfig::default() };

        let first_then_second = (
            adapt_batch(&ckpt, &dict, &b0, None, &cfg, 3, 0).unwrap(),
            adapt_batch(&ckpt, &dict, &b1, None, &cfg, 3, 1).unwrap(),
        );
        let second_then_first = (
            adapt_batch(&ckpt, &dict, &b1, None, &cfg, 3, 1).unwrap(),
            adapt_batch(&ckpt, &dict, &b0, None, &cfg, 3, 0).unwrap(),
        );
        assert_eq!(
            first_then_second.0.denoised.data(),
            second_then_first.1.denoised.data()
        );
        assert_eq!(
            first_then_second.1.denoised.data(),
            second_then_first.0.denoised.data()
        );
        assert_eq!(first_then_second.0.row, second_then_first.1.row);
    }

    #[test]
    fn adapt_dataset_shapes_and_determinism() {
        let (data, dict, ckpt) = tiny_world(10);
        let cfg = TTAConfig { batch: 4, ..TTAConfig::default() };
        let a = adapt_dataset(&ckpt, &data, &dict, &cfg, 2).unwrap();
        let b = adapt_dataset(&ckpt, &data, &dict, &cfg, 2).unwrap();
        assert_eq!(a.report.rows.len(), 3, "ceil(10/4) batches");
        assert_eq!(a.denoised.len(), 10 * 900);
        assert_eq!(a.report.rows, b.report.rows);
        assert_eq!(a.denoised, b.denoised);
        assert!(a.report.mean_snr_pre.is_some());
        let csv = a.report.to_csv();
        assert!(csv.starts_with(TTA_CSV_SCHEMA));
        assert_eq!(csv.lines().count(), 2 + 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("batch_idx,L_den,L_sparse"));
    }

    #[test]
    fn adapted_step_descends_on_this_batch() {
        let (data, dict, ckpt) = tiny_world(6);
        let rows: Vec<usize> = (0..6).collect();
        let x = batch_tensor(&data, &rows, false);
        let cfg = TTAConfig::default();
        let out = adapt_batch(&ckpt, &dict, &x, None, &cfg, 4, 0).unwrap();
        assert!(!out.row.fallback);
        assert!(out.row.param_delta_l2 > 0.0);

        let mut rng = stream(4, Ns::TtaAugment, 0);
        let x_aug = augment(&x, cfg.aug_noise_std, &mut rng).unwrap();
        let (after, ..) =
            tta_loss_at(&out.adapted_params, &ckpt, &dict, &x, &x_aug, &cfg).unwrap();
        assert!(
            after <= out.row.total,
            "one step went uphill: {} -> {}",
            out.row.total,
            after
        );
    }

    #[test]
    fn rejects_bad_configs_and_mismatched_dict() {
        assert!(TTAConfig { beta1: -1.0, ..TTAConfig::default() }.validate().is_err());
        assert!(TTAConfig { batch: 0, ..TTAConfig::default() }.validate().is_err());
        assert!(TTAConfig { reset_per_batch: false, ..TTAConfig::default() }
            .validate()
            .is_err());

        let (data, dict, mut ckpt) = tiny_world(4);
        ckpt.dict_hash = [0u8; 32];
        let x = batch_tensor(&data, &[0, 1], false);
        assert!(adapt_batch(&ckpt, &dict, &x, None, &TTAConfig::default(), 1, 0).is_err());
    }
}
