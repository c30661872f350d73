//! Metrics, run configuration and the end-to-end experiment pipeline.

mod config;
mod metrics;
mod pipeline;

pub use config::{DataSource, RunConfig, StageSeeds, CONFIG_KEYS};
pub use metrics::{accuracy, confusion, disagreements, net_gain, venn_counts, Disagreement, VennCounts};
pub use pipeline::{
    run_pipeline, run_pipeline_with_artifacts, write_artifacts, EvalReport, PipelineArtifacts, StageTime, StageTimes,
    TransitionSummary, REPORT_FILE, TIMINGS_FILE,
};
