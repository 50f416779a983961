//! End-to-end compression: regularized training and pruning, weight
//! sharing with retraining, and LCC decomposition of every layer, followed
//! by evaluation of the deployed adder programs.
//!
//! Stages run in that order and each can be switched off; a disabled stage
//! leaves the model untouched and no entry in the report. Every stage
//! checkpoints its model so separate invocations can pick up from it.

pub mod checkpoint;
pub mod config;
pub mod deploy;
pub mod report;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, LccAlgorithm, LccStage, PipelineConfig, PruneConfig, SharingStage, SqnrPolicy, SweepConfig};
pub use deploy::{DeployedLayer, DeployedModel, Product};
pub use report::{
    compression_ratio, emit_report, report_csv, sweep_stem, CompressionReport, LayerReport, LayerStage, Ratio,
    ReportFormat, Stage, StageSummary,
};
pub use run::{
    build_report, compact_model, decompose_model, decomposition_file, layer_matrices, layer_stage, load_datasets,
    load_decompositions, model_programs, resume_run, run_pipeline, run_sweep, run_sweep_with_data, run_with_data,
    save_decompositions, share_model, stage_checkpoint, train_baseline, train_pruned, Datasets, LayerDecomposition,
    RunOutcome,
};
