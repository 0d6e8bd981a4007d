//! Operational surface: evaluation, profiling, attention export, reports
//! and experiment configuration.

pub mod attention;
pub mod config;
pub mod eval;
pub mod profile;
pub mod report;

pub use eval::{evaluate_policy, rollouts, Controller, EpisodeOutcome, ExpertController, HeldOut, RandomController, TaskEval};
pub use profile::{profile_efficiency, profiling_bundles, EfficiencyReport, EfficiencyRow};
pub use attention::{attention_rollout, export_attention, AttentionDump};
pub use config::{config_schema, fingerprint, ExperimentConfig};
pub use report::{parse_csv, read_results, write_report, ReportFormat, ResultRow, Results, CSV_COLUMNS};
