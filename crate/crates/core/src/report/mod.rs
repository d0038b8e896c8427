//! Grading, result tables, sweeps and ablations. This is the only module that
//! reads stream labels.

mod experiment;
mod metrics;
mod sweep;
mod tables;

pub use experiment::Experiment;
pub use metrics::{
    accuracy, entropy_accuracy_profile, gain, grade, prediction_shift, summarize, summarize_generalization,
    DomainError, EntropyBin, GeneralizationReport, LabelKey, RunReport, ShiftMatrix, ShiftTable, StepRecord,
    StepSummary, Timing, ENTROPY_BINS,
};
pub use sweep::{
    ablation, ablation_configs, grid_preset, inapplicable_cells, sweep, GridCell, ABLATION_ROWS, KN_GRID, LAMBDA_KD_GRID, LAMBDA_ML_GRID,
};
pub use tables::{
    entropy_profile_csv, format_table, generalization_csv, labeled_csv, parse_entropy_profile_csv,
    parse_labeled_csv, parse_shifts_csv, parse_table_csv, shifts_csv, table_csv, LabeledError, TableRow, TOTAL_ROW,
};
