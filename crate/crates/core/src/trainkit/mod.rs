//! Training, evaluation, ablation and run exports.

pub mod ablate;
pub mod config;
pub mod export;
pub mod fixture;
pub mod metrics;
pub mod model;
pub mod train;

pub use ablate::{run_ablation, AblationAxis, AblationCell};
pub use config::{Backbone, CohortFiles, DataSource, OptimizerKind, TrainConfig};
pub use export::{export_run, load_trained};
pub use metrics::{Confusion, MetricsReport, MetricsSummary};
pub use model::{CgmclModel, ForwardPass, GraphContext, Objective};
pub use train::{evaluate, importance_scores, prepare_cohort, train, Evaluation, TrainOutcome, TrainedModel};
