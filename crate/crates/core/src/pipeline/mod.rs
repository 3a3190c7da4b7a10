//! Staged experiment runner: train, compress, attack, evaluate, report.
//!
//! Each stage writes its outputs under the output directory plus a
//! `{stage}.done.json` marker carrying the plan hash and the cells that
//! failed. A stage refuses to start without the marker of its predecessor.

pub mod plan;
pub mod report;
pub mod run;

pub use plan::{
    AttackSpec, CompressionSpec, DatasetSpec, ExperimentPlan, Int8Mode, MetricSpec, ModelSpec, MrSpec,
    NrTrainingSpec, SrSpec,
};
pub use report::{median, AggregateRow, AuditReport, CellFailure, CellRow, KlRow, ModelRow, Provenance};
pub use run::{derive_seed, run_plan, run_stage, AttackRecord, Evaluation, RunOptions, Stage, StageDone};
