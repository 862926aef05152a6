//! Evaluation on fixed door sequences, summary statistics and paired
//! ablation reports.

mod ablation;
mod eval;
mod metrics;

pub use ablation::{
    compare, compare_bp_ap_fap, episodes_csv, git_revision, metrics_csv, run_ablation, AblationResult, BpApFap,
    Experiment, ExperimentSpec, RunMeta,
};
pub use eval::{evaluate, evaluation_doors, EpisodeMetrics, EvalOptions, Evaluation, Pooling, PolicyVariant};
pub use metrics::{percentile, ErrorStats, MetricsReport, NormStats};
