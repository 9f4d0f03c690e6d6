//! Scoring (accuracy, consensus n-gram similarity), ablation harness, and
//! report emission.

mod ablation;
mod cider;
mod metrics;
mod report;

pub use ablation::{
    paper_tables_cells, prepare_data, run_ablation, AblationTable, CellSpec, CellSummary,
    CheckLine, PreparedData, CELL_ADD_BASELINE, CELL_CONCAT, CELL_FULL, CELL_OPT_ONLY,
    CELL_PGKE_ONLY, CELL_QASC_ONLY, CELL_TIR_ONLY,
};
pub use cider::{cider, CiderOutcome};
pub use metrics::{accuracy, evaluate_records, normalize_answer, MetricsReport, PredRecord};
pub use report::{parse_csv, table_to_csv, table_to_json, write_report, RunRow};
