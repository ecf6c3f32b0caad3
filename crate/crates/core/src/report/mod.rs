//! Evaluation metrics and CSV reporting.

pub mod metrics;
pub mod runners;

pub use metrics::{mean_abs_first_diff, snr, snr_f32, SNR_CAP_DB};
pub use runners::{
    ablate_k, ablate_losses, dict_only_denoise, domain_report, k_ablation_csv, loss_ablation_csv,
    metric_csv, model_head_stats, parse_k_ablation_csv, parse_loss_ablation_csv,
    parse_metric_csv, HeadStats, KAblationRow, LossAblationRow, Method, MetricRow, LOSS_SUBSETS,
};
