//! Training loop, evaluation, model comparison and the hyperparameter sweep.

pub mod compare;
pub mod metrics;
pub mod optim;
pub mod sweep;
pub mod synthetic;
pub mod train;

pub use compare::{compare_models, ChiSquareMethod, ComparisonReport, Contingency, VennCounts};
pub use metrics::{evaluate, Confusion, EvalReport, Metrics, SnippetRecord};
pub use optim::Adam;
pub use sweep::{default_grid, sweep, write_sweep_csv, SweepRow};
pub use synthetic::synthetic_split;
pub use train::{fit, train, EpochRecord, Preset, TrainConfig, TrainOutcome};
