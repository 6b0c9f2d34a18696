//! Metrics, evaluation protocols, and report aggregation.

mod metrics;
mod protocol;
mod report;

pub use metrics::{
    accuracy, auc, average_ranks, f1, matthews, pearson, score, spearman, Confusion,
};
pub use protocol::{
    par_map, run_ablations, run_crossval, run_lowresource, sweep_scanpaths, Experiment, Protocol,
    RunResult, ABLATIONS,
};
pub use report::{
    mean_stderr, reports_to_csv, AblationReport, EvalReport, ReportConfig, RunValue, SweepPoint,
    SweepReport, CSV_HEADER,
};
