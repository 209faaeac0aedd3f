//! Box AP, multi-run evaluation, transfer evaluation and ablations.

mod ablation;
mod ap;
mod report;

pub use ablation::{
    parse_axis_values, run_ablation, AblationAxis, AblationGrid, AblationInputs, AblationRow, AblationTable,
    CSV_HEADER,
};
pub use ap::{average_precision, box_ap, iou_thresholds, match_and_score, ApSummary, ScoredBox};
pub use report::{
    aggregate, evaluate, evaluate_transfer, predict_dataset, run_result, score_predictions, EvalReport, RunResult,
    Stat, TransferReport,
};
