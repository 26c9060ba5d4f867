//! Nested cross-validation (leave-five-out for transfer learning, leave-one-out for
//! the meta stage), leakage audit, metrics and the experiment runner.

mod audit;
mod experiment;
mod folds;
mod metrics;
mod report;

use serde::{Deserialize, Serialize};

pub use audit::{audit_leakage, AuditReport, FitProvenance, PlanStage, Violation, ViolationKind};
pub use experiment::{
    run_experiment, run_window, select_source_base, ConditionReport, ExperimentOutput, PipelineConfig, PretrainMode,
    SourceSelection, WindowOutcome, CONDITIONS,
};
pub use folds::{
    class_ratio, pick_validation_pair, plan_lfocv, plan_loocv, ratio_gap, Fold, FoldConfig, FoldPlan, PairChoice,
    ParticipantLabels, PlanKind, RatioMode, VALIDATION_SIZE,
};
pub use metrics::{compute_metrics, Confusion, Distribution, MetricsReport, ParticipantScore};
pub use report::{render_markdown, write_predictions_jsonl, ReportBundle, REPORT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Tl,
    Meta,
    Baseline,
}

/// One prediction for one EMA, with the fold and stage that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Window label (`1.5h`) or `all` for the maximal EMA set.
    pub window: String,
    pub condition: String,
    pub participant_id: String,
    pub ema_timestamp: f64,
    pub label: u8,
    pub tl_probability: Option<f64>,
    pub meta_probability: Option<f64>,
    pub predicted_class: u8,
    /// Fold of the plan that produced this record (leave-five-out for `tl`,
    /// leave-one-out otherwise).
    pub fold_id: usize,
    /// Leave-five-out fold that produced `tl_probability`.
    pub tl_fold_id: Option<usize>,
    pub stage: Stage,
    pub model_hash: Option<String>,
}
