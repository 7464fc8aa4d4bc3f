//! Experiment drivers behind the command line: training runs, clipping sweeps,
//! estimator oracles, single estimates, and memory accounting.

mod ablate;
mod config;
mod estimate;
mod memory;
mod runlog;
mod train;
mod verify;

pub use ablate::{ablate_clipping, repeat_seed, AblationReport, AblationRow};
pub use config::{format_clip, DatasetSpec, RunConfig, CONFIG_KEYS};
pub use estimate::{estimate_once, EstimateReport};
pub use memory::{
    account_memory, parse_param_count, round_sig, MemoryBreakdown, MemoryModel, MemoryRow, Optimizer, GB,
    REFERENCE_MODE, SCALE_BYTES,
};
pub use runlog::{EvalRecord, RunLog, StepRecord, RUNLOG_SCHEMA};
pub use train::{calibrate_threshold, run, step_seed, train, Metrics, TrainOptions, TrainOutcome};
pub use verify::{
    quantile_abs, verify_unbiased, ClipSpec, CoordinateStat, OracleProblem, VarianceStat, VerifyConfig,
    VerifyReport, MIN_SAMPLES, SE_BAND,
};
