//! `dptta` — pipeline driver.
//!
//! Subcommands cover the whole workflow: `gen` synthesizes a corpus, `dict
//! learn` fits the sparse dictionary, `train` fits the denoiser, `adapt`
//! runs per-batch test-time adaptation, `eval` compares methods per domain,
//! and `ablate` sweeps dictionary sizes or adaptation-loss subsets.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dptta_core::dict::{
    encode_corpus, learn_dictionary, load_dictionary, save_dictionary, DictLearnConfig,
};
use dptta_core::net::{load_checkpoint, save_checkpoint, train, NetConfig, TrainConfig};
use dptta_core::report::runners::{
    ablate_k, ablate_losses, domain_report, k_ablation_csv, loss_ablation_csv, metric_csv,
};
use dptta_core::sim::store::{load_dataset, save_dataset};
use dptta_core::sim::{make_dataset, Dataset, DomainKind, DomainSpec};
use dptta_core::tta::{adapt_dataset, TTAConfig};
use dptta_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dptta",
    version,
    about = "Dictionary-prior denoising and test-time adaptation for TEM signals"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a clean/noisy signal corpus for one noise domain.
    Gen(GenArgs),
    /// Dictionary operations.
    #[command(subcommand)]
    Dict(DictCmd),
    /// Train the denoiser on a source corpus against a frozen dictionary.
    Train(TrainArgs),
    /// Adapt the trained model per batch on a target corpus.
    Adapt(AdaptArgs),
    /// Compare noisy/source/dp-tta/dict-only on one or more corpora.
    Eval(EvalArgs),
    /// Sweep dictionary sizes or adaptation-loss subsets.
    #[command(subcommand)]
    Ablate(AblateCmd),
}

#[derive(Args)]
struct GenArgs {
    /// Noise domain: source, agn, lfi, hfi, imp, or cmp.
    #[arg(long)]
    domain: String,
    /// Number of signals.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DictCmd {
    /// Fit a sparse dictionary to a corpus's clean signals.
    Learn(DictLearnArgs),
}

#[derive(Args)]
struct DictLearnArgs {
    /// Training dataset directory (clean signals required).
    #[arg(long)]
    data: PathBuf,
    /// Number of atoms.
    #[arg(long, default_value_t = 64)]
    k: usize,
    /// Sparsity penalty weight.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Alternating rounds of encoding and atom updates.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dictionary file.
    #[arg(long)]
    out: PathBuf,
    /// Allow more atoms than corpus-size/100.
    #[arg(long, default_value_t = false)]
    no_capacity_check: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Source dataset directory (clean signals required).
    #[arg(long)]
    data: PathBuf,
    /// Dictionary file the model conditions on.
    #[arg(long)]
    dict: PathBuf,
    /// Scale preset: paper (width 1.0, 100 epochs, batch 256) or desk
    /// (width 0.25, 20 epochs, batch 64).
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint file; train_log.csv lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Override the preset's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the preset's batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Override the preset's learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    /// Target dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Weight of the sparse-code and one-order-variation losses.
    #[arg(long, default_value_t = 1.0)]
    beta1: f64,
    /// Weight of the denoised-output consistency loss.
    #[arg(long, default_value_t = 1.0)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Augmentation noise standard deviation in raw mV.
    #[arg(long, default_value_t = 120.0)]
    noise_level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-batch report CSV path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    /// Dataset directories to evaluate (repeatable).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Adaptation batch size used for the dp-tta rows.
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Metric table CSV path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Subcommand)]
enum AblateCmd {
    /// Fit dictionaries across atom counts, recording MSE and sparsity.
    DictSize(AblateKArgs),
    /// Adapt under each loss subset, recording SNR gains.
    Losses(AblateLossArgs),
}

#[derive(Args)]
struct AblateKArgs {
    /// Dataset directory (clean signals required).
    #[arg(long)]
    data: PathBuf,
    /// Atom counts to sweep, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateLossArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    /// Target dataset directory (clean signals required).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long)]
    report: PathBuf,
}

/// The normalized clean corpus and its sparse codes against a dictionary —
/// shared by training and dictionary fitting.
fn normalized_clean(data: &Dataset, norm_scale: f64) -> Result<Vec<f32>> {
    let clean = data
        .clean
        .as_ref()
        .ok_or_else(|| Error::invalid("this corpus carries no clean signals"))?;
    Ok(clean.iter().map(|&v| v * norm_scale as f32).collect())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen(a) => {
            let kind = DomainKind::parse(&a.domain)?;
            let ds = make_dataset(&DomainSpec::default_for(kind), a.n, a.seed)?;
            save_dataset(&ds, &a.out)?;
            println!(
                "wrote {} {} signals to {}",
                ds.n,
                kind.as_str(),
                a.out.display()
            );
        }
        Cmd::Dict(DictCmd::Learn(a)) => {
            let data = load_dataset(&a.data)?;
            let y = normalized_clean(&data, NetConfig::default().norm_scale)?;
            let cfg = DictLearnConfig {
                k: a.k,
                lambda: a.lambda,
                epochs: a.epochs,
                seed: a.seed,
                enforce_capacity: !a.no_capacity_check,
                ..DictLearnConfig::default()
            };
            let (dict, _, report) = learn_dictionary(&y, data.n, data.grid.n, &cfg)?;
            save_dictionary(&dict, &a.out)?;
            println!(
                "learned {} atoms over {} signals: mse {:.3e}, sparsity {:.3}, wrote {}",
                dict.k(),
                data.n,
                report.final_mse,
                report.final_sparsity,
                a.out.display()
            );
        }
        Cmd::Train(a) => {
            let data = load_dataset(&a.data)?;
            let dict = load_dictionary(&a.dict)?;
            let (net_cfg, mut train_cfg) = match a.preset.as_str() {
                "paper" => (NetConfig::default(), TrainConfig::default()),
                "desk" => (
                    NetConfig { k: dict.k(), ..NetConfig::desk() },
                    TrainConfig::desk(),
                ),
                other => {
                    return Err(Error::invalid(format!(
                        "unknown preset {other:?} (expected paper or desk)"
                    )))
                }
            };
            let net_cfg = NetConfig { k: dict.k(), ..net_cfg };
            if let Some(e) = a.epochs {
                train_cfg.epochs = e;
            }
            if let Some(b) = a.batch {
                train_cfg.batch = b;
            }
            if let Some(lr) = a.lr {
                train_cfg.lr = lr;
            }
            train_cfg.seed = a.seed;

            let y = normalized_clean(&data, net_cfg.norm_scale)?;
            let (codes, _) = encode_corpus(&dict, &y, data.n, dict.lambda, 300, 1e-6, None)?;
            let ckpt = train(&data, &dict, &codes, &net_cfg, &train_cfg)?;
            save_checkpoint(&ckpt, &a.out)?;

            let mut log = String::from("# schema: train-log/1\nepoch,L_regress,L_denoising,total\n");
            for row in &ckpt.train_log {
                log.push_str(&format!(
                    "{},{},{},{}\n",
                    row.epoch, row.l_regress, row.l_denoising, row.total
                ));
            }
            let log_path = a.out.with_file_name("train_log.csv");
            std::fs::write(&log_path, log)?;
            let last = ckpt.train_log.last().expect("at least one epoch");
            println!(
                "trained {} epochs (final loss {:.4e}), wrote {} and {}",
                ckpt.train_log.len(),
                last.total,
                a.out.display(),
                log_path.display()
            );
        }
        Cmd::Adapt(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let dict = load_dictionary(&a.dict)?;
            let data = load_dataset(&a.data)?;
            let cfg = TTAConfig {
                beta1: a.beta1,
                beta2: a.beta2,
                lr: a.lr,
                batch: a.batch,
                aug_noise_std: a.noise_level,
                ..TTAConfig::default()
            };
            let out = adapt_dataset(&ckpt, &data, &dict, &cfg, a.seed)?;
            std::fs::write(&a.report, out.report.to_csv())?;
            match (out.report.mean_snr_pre, out.report.mean_snr_post) {
                (Some(pre), Some(post)) => println!(
                    "adapted {} signals in {} batches: SNR {:.2} -> {:.2} dB ({:+.2}), wrote {}",
                    out.report.n_signals,
                    out.report.rows.len(),
                    pre,
                    post,
                    post - pre,
                    a.report.display()
                ),
                _ => println!(
                    "adapted {} signals in {} batches (no clean references), wrote {}",
                    out.report.n_signals,
                    out.report.rows.len(),
                    a.report.display()
                ),
            }
        }
        Cmd::Eval(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let dict = load_dictionary(&a.dict)?;
            let datasets: Vec<Dataset> =
                a.data.iter().map(|d| load_dataset(d)).collect::<Result<_>>()?;
            let refs: Vec<&Dataset> = datasets.iter().collect();
            let cfg = TTAConfig { batch: a.batch, ..TTAConfig::default() };
            let rows = domain_report(&ckpt, &dict, &refs, &cfg, a.seed)?;
            std::fs::write(&a.report, metric_csv(&rows))?;
            println!("wrote {} metric rows to {}", rows.len(), a.report.display());
        }
        Cmd::Ablate(AblateCmd::DictSize(a)) => {
            let data = load_dataset(&a.data)?;
            let y = normalized_clean(&data, NetConfig::default().norm_scale)?;
            let base = DictLearnConfig {
                lambda: a.lambda,
                epochs: a.epochs,
                ..DictLearnConfig::default()
            };
            let rows = ablate_k(&y, data.n, data.grid.n, &a.ks, &base, a.seed)?;
            std::fs::write(&a.report, k_ablation_csv(&rows))?;
            println!("wrote {} dictionary-size rows to {}", rows.len(), a.report.display());
        }
        Cmd::Ablate(AblateCmd::Losses(a)) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let dict = load_dictionary(&a.dict)?;
            let data = load_dataset(&a.data)?;
            let base = TTAConfig { batch: a.batch, ..TTAConfig::default() };
            let rows = ablate_losses(&ckpt, &dict, &data, &base, a.seed)?;
            std::fs::write(&a.report, loss_ablation_csv(&rows))?;
            println!("wrote {} loss-subset rows to {}", rows.len(), a.report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
