//! Experiment orchestration: domain-shift comparisons and ablations,
//! emitted as versioned, re-parseable CSV tables.

use crate::dict::{encode_corpus, learn_dictionary, reconstruct, DictLearnConfig, Dictionary};
use crate::error::{Error, Result};
use crate::net::{batch_images, forward, Checkpoint};
use crate::report::metrics::{mean_abs_first_diff, snr_f32};
use crate::sim::{Dataset, DomainKind};
use crate::tta::{adapt_dataset, TTAConfig};

pub const METRIC_CSV_SCHEMA: &str = "# schema: metric-report/1";
pub const K_ABLATION_CSV_SCHEMA: &str = "# schema: dict-ablation/1";
pub const LOSS_ABLATION_CSV_SCHEMA: &str = "# schema: loss-ablation/1";

/// How a signal estimate was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// The raw noisy input itself.
    Noisy,
    /// The trained model without adaptation.
    Source,
    /// The adapted model.
    DpTta,
    /// Sparse-encode the noisy signal against the frozen dictionary and
    /// reconstruct — no network involved.
    DictOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Noisy, Method::Source, Method::DpTta, Method::DictOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Noisy => "noisy",
            Method::Source => "source",
            Method::DpTta => "dp-tta",
            Method::DictOnly => "dict-only",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::format(format!("unknown method {s:?}")))
    }
}

/// One domain/method cell of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub domain: DomainKind,
    pub method: Method,
    pub mean_snr_db: f64,
    pub mean_abs_first_diff: f64,
    pub n: usize,
}

/// Mean SNR and mean smoothness of flattened estimate rows against a
/// dataset's clean references.
fn row_stats(data: &Dataset, est: &[f32]) -> Result<(f64, f64)> {
    let w = data.grid.n;
    let mut snr_acc = 0.0;
    let mut mafd_acc = 0.0;
    for i in 0..data.n {
        let clean = data
            .clean_row(i)
            .ok_or_else(|| Error::invalid("metrics require clean references"))?;
        let e = &est[i * w..(i + 1) * w];
        snr_acc += snr_f32(clean, e)?;
        let ef: Vec<f64> = e.iter().map(|&v| v as f64).collect();
        mafd_acc += mean_abs_first_diff(&ef)?;
    }
    Ok((snr_acc / data.n as f64, mafd_acc / data.n as f64))
}

/// Encodes every noisy row against the frozen dictionary and reconstructs,
/// in the dictionary's normalized domain; returns raw-unit rows.
pub fn dict_only_denoise(dict: &Dictionary, data: &Dataset, norm_scale: f64) -> Result<Vec<f32>> {
    let w = data.grid.n;
    if dict.atom_len() != w {
        return Err(Error::invalid("dictionary atom length does not match the signals"));
    }
    let yn: Vec<f32> = data.noisy.iter().map(|&v| v * norm_scale as f32).collect();
    let (codes, _) = encode_corpus(dict, &yn, data.n, dict.lambda, 300, 1e-6, None)?;
    let inv = (1.0 / norm_scale) as f32;
    let mut out = Vec::with_capacity(data.n * w);
    for i in 0..data.n {
        let rec = reconstruct(dict, codes.row(i))?;
        out.extend(rec.iter().map(|&v| v as f32 * inv));
    }
    Ok(out)
}

/// Four-method comparison on each dataset: raw noisy input, the source
/// model, the adapted model, and the dictionary-only baseline.
pub fn domain_report(
    ckpt: &Checkpoint,
    dict: &Dictionary,
    datasets: &[&Dataset],
    tta_cfg: &TTAConfig,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    if datasets.is_empty() {
        return Err(Error::invalid("domain_report: no datasets"));
    }
    let mut rows = Vec::with_capacity(datasets.len() * Method::ALL.len());
    for data in datasets {
        if data.clean.is_none() {
            return Err(Error::invalid(format!(
                "domain_report: {} corpus lacks clean references",
                data.spec.kind.as_str()
            )));
        }
        let adapted = adapt_dataset(ckpt, data, dict, tta_cfg, seed)?;
        let dict_rows = dict_only_denoise(dict, data, ckpt.cfg.norm_scale)?;
        for method in Method::ALL {
            let est: &[f32] = match method {
                Method::Noisy => &data.noisy,
                Method::Source => &adapted.source_denoised,
                Method::DpTta => &adapted.denoised,
                Method::DictOnly => &dict_rows,
            };
            let (mean_snr_db, mafd) = row_stats(data, est)?;
            rows.push(MetricRow {
                domain: data.spec.kind,
                method,
                mean_snr_db,
                mean_abs_first_diff: mafd,
                n: data.n,
            });
        }
    }
    Ok(rows)
}

/// Corpus-mean statistics of the model's two output heads, next to the
/// clean references' own smoothness. Drives the one-order-variation
/// comparison: the dictionary head should track the clean signal's
/// smoothness more closely, the decoder head should win on SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadStats {
    pub mean_snr_denoised: f64,
    pub mean_snr_dict_recon: f64,
    pub mafd_denoised: f64,
    pub mafd_dict_recon: f64,
    pub mafd_clean: f64,
    pub n: usize,
}

/// Runs the source model over a dataset in batches and aggregates per-head
/// means (no adaptation).
pub fn model_head_stats(
    ckpt: &Checkpoint,
    dict: &Dictionary,
    data: &Dataset,
    batch: usize,
) -> Result<HeadStats> {
    if data.n == 0 || batch == 0 {
        return Err(Error::invalid("model_head_stats: empty dataset or batch"));
    }
    let side = ckpt.cfg.input_side;
    let w = side * side;
    let rows: Vec<usize> = (0..data.n).collect();
    let mut snr_den = 0.0;
    let mut snr_rec = 0.0;
    let mut mafd_den = 0.0;
    let mut mafd_rec = 0.0;
    let mut mafd_cln = 0.0;
    for chunk in rows.chunks(batch) {
        let x = batch_images(data, chunk, side, 1.0, false)?;
        let out = forward(ckpt, dict, &x)?;
        for (bi, &row) in chunk.iter().enumerate() {
            let clean = data
                .clean_row(row)
                .ok_or_else(|| Error::invalid("model_head_stats requires clean references"))?;
            let den = &out.denoised.data()[bi * w..(bi + 1) * w];
            let rec = &out.dict_recon.data()[bi * w..(bi + 1) * w];
            snr_den += snr_f32(clean, den)?;
            snr_rec += snr_f32(clean, rec)?;
            let to64 = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<f64>>();
            mafd_den += mean_abs_first_diff(&to64(den))?;
            mafd_rec += mean_abs_first_diff(&to64(rec))?;
            mafd_cln += mean_abs_first_diff(&to64(clean))?;
        }
    }
    let n = data.n as f64;
    Ok(HeadStats {
        mean_snr_denoised: snr_den / n,
        mean_snr_dict_recon: snr_rec / n,
        mafd_denoised: mafd_den / n,
        mafd_dict_recon: mafd_rec / n,
        mafd_clean: mafd_cln / n,
        n: data.n,
    })
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// One dictionary-size cell: reconstruction error and exact-zero fraction
/// of the final fit.
#[derive(Clone, Debug, PartialEq)]
pub struct KAblationRow {
    pub k: usize,
    pub recon_mse: f64,
    pub sparsity: f64,
}

/// Fits one dictionary per requested atom count on the same corpus and
/// records each fit's reconstruction MSE and code sparsity. `base` supplies
/// everything but `k`; the capacity guard is lifted so small corpora can
/// sweep large atom counts.
pub fn ablate_k(
    y: &[f32],
    n: usize,
    atom_len: usize,
    ks: &[usize],
    base: &DictLearnConfig,
    seed: u64,
) -> Result<Vec<KAblationRow>> {
    if ks.is_empty() {
        return Err(Error::invalid("ablate_k: no atom counts requested"));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let cfg = DictLearnConfig { k, seed, enforce_capacity: false, ..base.clone() };
        let (_, _, report) = learn_dictionary(y, n, atom_len, &cfg)?;
        rows.push(KAblationRow { k, recon_mse: report.final_mse, sparsity: report.final_sparsity });
    }
    Ok(rows)
}

/// One loss-subset cell of the adaptation ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossAblationRow {
    pub subset: &'static str,
    pub snr_pre: f64,
    pub snr_post: f64,
    pub gain_db: f64,
}

/// `(label, use_den, use_sparse, use_oov)` for the seven studied subsets.
pub const LOSS_SUBSETS: [(&str, bool, bool, bool); 7] = [
    ("den", true, false, false),
    ("sparse", false, true, false),
    ("oov", false, false, true),
    ("den+sparse", true, true, false),
    ("den+oov", true, false, true),
    ("sparse+oov", false, true, true),
    ("full", true, true, true),
];

/// Adapts the same corpus once per loss subset and records the SNR gain of
/// each. The corpus must carry clean references.
pub fn ablate_losses(
    ckpt: &Checkpoint,
    dict: &Dictionary,
    data: &Dataset,
    base: &TTAConfig,
    seed: u64,
) -> Result<Vec<LossAblationRow>> {
    if data.clean.is_none() {
        return Err(Error::invalid("ablate_losses: corpus lacks clean references"));
    }
    let mut rows = Vec::with_capacity(LOSS_SUBSETS.len());
    for (subset, den, sparse, oov) in LOSS_SUBSETS {
        let cfg = TTAConfig { use_den: den, use_sparse: sparse, use_oov: oov, ..base.clone() };
        let out = adapt_dataset(ckpt, data, dict, &cfg, seed)?;
        let snr_pre = out.report.mean_snr_pre.expect("clean checked above");
        let snr_post = out.report.mean_snr_post.expect("clean checked above");
        rows.push(LossAblationRow { subset, snr_pre, snr_post, gain_db: snr_post - snr_pre });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV round trips
// ---------------------------------------------------------------------------

fn csv_body<'a>(text: &'a str, schema: &str, header: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == schema => {}
        other => {
            return Err(Error::format(format!(
                "expected schema line {schema:?}, found {other:?}"
            )))
        }
    }
    match lines.next() {
        Some(l) if l == header => {}
        other => {
            return Err(Error::format(format!(
                "expected header {header:?}, found {other:?}"
            )))
        }
    }
    let want = header.split(',').count();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != want {
            return Err(Error::format(format!(
                "row has {} fields, expected {want}: {line:?}",
                fields.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::format(format!("bad numeric field {s:?}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::format(format!("bad count field {s:?}")))
}

const METRIC_HEADER: &str = "domain,method,mean_snr_db,mean_abs_first_diff,n";

pub fn metric_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRIC_CSV_SCHEMA}\n{METRIC_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.domain.as_str(),
            r.method.as_str(),
            r.mean_snr_db,
            r.mean_abs_first_diff,
            r.n
        ));
    }
    out
}

pub fn parse_metric_csv(text: &str) -> Result<Vec<MetricRow>> {
    csv_body(text, METRIC_CSV_SCHEMA, METRIC_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(MetricRow {
                domain: DomainKind::parse(f[0])?,
                method: Method::parse(f[1])?,
                mean_snr_db: parse_f64(f[2])?,
                mean_abs_first_diff: parse_f64(f[3])?,
                n: parse_usize(f[4])?,
            })
        })
        .collect()
}

const K_ABLATION_HEADER: &str = "k,recon_mse,sparsity";

pub fn k_ablation_csv(rows: &[KAblationRow]) -> String {
    let mut out = format!("{K_ABLATION_CSV_SCHEMA}\n{K_ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.k, r.recon_mse, r.sparsity));
    }
    out
}

pub fn parse_k_ablation_csv(text: &str) -> Result<Vec<KAblationRow>> {
    csv_body(text, K_ABLATION_CSV_SCHEMA, K_ABLATION_HEADER)?
        .into_iter()
        .map(|f| {
            Ok(KAblationRow {
                k: parse_usize(f[0])?,
                recon_mse: parse_f64(f[1])?,
                sparsity: parse_f64(f[2])?,
            })
        })
        .collect()
}

const LOSS_ABLATION_HEADER: &str = "subset,snr_pre,snr_post,gain_db";

pub fn loss_ablation_csv(rows: &[LossAblationRow]) -> String {
    let mut out = format!("{LOSS_ABLATION_CSV_SCHEMA}\n{LOSS_ABLATION_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.subset, r.snr_pre, r.snr_post, r.gain_db));
    }
    out
}

pub fn parse_loss_ablation_csv(text: &str) -> Result<Vec<LossAblationRow>> {
    csv_body(text, LOSS_ABLATION_CSV_SCHEMA, LOSS_ABLATION_HEADER)?
        .into_iter()
        .map(|f| {
            let subset = LOSS_SUBSETS
                .iter()
                .map(|&(s, ..)| s)
                .find(|&s| s == f[0])
                .ok_or_else(|| Error::format(format!("unknown loss subset {:?}", f[0])))?;
            Ok(LossAblationRow {
                subset,
                snr_pre: parse_f64(f[1])?,
                snr_post: parse_f64(f[2])?,
                gain_db: parse_f64(f[3])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, NetConfig};
    use crate::sim::{make_dataset, DomainSpec};

    fn tiny_world(kind: DomainKind, n: usize) -> (Dataset, Dictionary, Checkpoint) {
        let data = make_dataset(&DomainSpec::default_for(kind), n, 55).unwrap();
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
            params: init_params(&cfg, 4).unwrap(),
            dict_hash: dict.source_hash,
            train_log: Vec::new(),
            seed: 4,
        };
        (data, dict, ckpt)
    }

    #[test]
    fn domain_report_emits_four_methods_per_domain() {
        let (data, dict, ckpt) = tiny_world(DomainKind::Agn, 5);
        let cfg = TTAConfig { batch: 5, ..TTAConfig::default() };
        let rows = domain_report(&ckpt, &dict, &[&data], &cfg, 1).unwrap();
        assert_eq!(rows.len(), 4);
        let methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        assert_eq!(methods, Method::ALL.to_vec());
        assert!(rows.iter().all(|r| r.domain == DomainKind::Agn && r.n == 5));
        assert!(rows.iter().all(|r| r.mean_snr_db.is_finite()));
        // The raw noisy row must sit inside the generator's target band.
        let noisy = &rows[0];
        let (lo, hi) = data.spec.snr_db.unwrap();
        assert!(noisy.mean_snr_db > lo - 1.0 && noisy.mean_snr_db < hi + 1.0);
    }

    #[test]
    fn metric_csv_round_trips_and_is_deterministic() {
        let (data, dict, ckpt) = tiny_world(DomainKind::Lfi, 4);
        let cfg = TTAConfig { batch: 4, ..TTAConfig::default() };
        let rows = domain_report(&ckpt, &dict, &[&data], &cfg, 9).unwrap();
        let text = metric_csv(&rows);
        assert_eq!(parse_metric_csv(&text).unwrap(), rows);
        let rows2 = domain_report(&ckpt, &dict, &[&data], &cfg, 9).unwrap();
        assert_eq!(metric_csv(&rows2), text, "same seed, same bytes");
        assert!(parse_metric_csv("garbage").is_err());
    }

    #[test]
    fn head_stats_cover_every_signal() {
        let (data, dict, ckpt) = tiny_world(DomainKind::Hfi, 5);
        let s = model_head_stats(&ckpt, &dict, &data, 2).unwrap();
        assert_eq!(s.n, 5);
        assert!(s.mafd_clean > 0.0);
        assert!(s.mean_snr_denoised.is_finite() && s.mean_snr_dict_recon.is_finite());
    }

    #[test]
    fn ablate_k_exact_representation_at_full_rank() {
        // As many atoms as signals and no sparsity penalty: the fit can
        // represent the corpus exactly, so the error collapses.
        let n = 4;
        let len = 64;
        let mut y = Vec::with_capacity(n * len);
        let mut state = 0x2545f4914f6cdd1du64;
        for _ in 0..n * len {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            y.push(((state >> 40) as f64 / (1u64 << 24) as f64 - 0.5) as f32);
        }
        let base = DictLearnConfig {
            lambda: 0.0,
            epochs: 3,
            max_iters: 400,
            tol: 1e-10,
            ..DictLearnConfig::default()
        };
        let rows = ablate_k(&y, n, len, &[n], &base, 3).unwrap();
        let power = y.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / (n * len) as f64;
        assert!(
            rows[0].recon_mse < 1e-6 * power,
            "mse {} vs power {power}",
            rows[0].recon_mse
        );
    }

    #[test]
    fn k_ablation_csv_round_trips() {
        let rows = vec![
            KAblationRow { k: 8, recon_mse: 0.25, sparsity: 0.5 },
            KAblationRow { k: 32, recon_mse: 0.125, sparsity: 0.75 },
        ];
        let text = k_ablation_csv(&rows);
        assert_eq!(parse_k_ablation_csv(&text).unwrap(), rows);
    }

    #[test]
    fn ablate_losses_emits_seven_subsets() {
        let (data, dict, ckpt) = tiny_world(DomainKind::Imp, 4);
        let cfg = TTAConfig { batch: 4, ..TTAConfig::default() };
        let rows = ablate_losses(&ckpt, &dict, &data, &cfg, 6).unwrap();
        assert_eq!(rows.len(), 7);
        let labels: Vec<&str> = rows.iter().map(|r| r.subset).collect();
        assert_eq!(
            labels,
            vec!["den", "sparse", "oov", "den+sparse", "den+oov", "sparse+oov", "full"]
        );
        for r in &rows {
            assert!((r.gain_db - (r.snr_post - r.snr_pre)).abs() < 1e-12);
        }
        let text = loss_ablation_csv(&rows);
        assert_eq!(parse_loss_ablation_csv(&text).unwrap(), rows);
    }

    #[test]
    fn dict_only_baseline_reconstructs_from_frozen_atoms() {
        let (data, dict, ckpt) = tiny_world(DomainKind::Cmp, 4);
        let rows = dict_only_denoise(&dict, &data, ckpt.cfg.norm_scale).unwrap();
        assert_eq!(rows.len(), 4 * 900);
        assert!(rows.iter().all(|v| v.is_finite()));
        // Reconstructions live in the span of a 3-atom dictionary of smooth
        // decays, so they are far smoother than the noisy input.
        let (_, mafd_noisy) = row_stats(&data, &data.noisy).unwrap();
        let (_, mafd_dict) = row_stats(&data, &rows).unwrap();
        assert!(mafd_dict < mafd_noisy);
    }
}
