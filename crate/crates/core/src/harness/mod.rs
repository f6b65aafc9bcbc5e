//! End-to-end experiment driver: data, two-phase training, evaluation,
//! aggregation across seeds, and result files.

mod config;
mod emit;
mod run;

pub use config::{
    BaseConfig, CorrectionConfig, DataConfig, DatasetConfig, EvaluationConfig, ExperimentConfig, OptimizerConfig,
    Oracle,
};
pub use emit::{emit, read_curves_csv, read_result, write_curves_csv, EmitFormats, CURVE_COLUMNS};
pub use run::{
    aggregate, load_data, run_experiment, run_seed, sweep, Aggregate, BestEpoch, CurveRow, ExperimentOutcome,
    MethodSummary, Phase, RunResult, SplitData, SweepRow, Timing, CODE_VERSION,
};
