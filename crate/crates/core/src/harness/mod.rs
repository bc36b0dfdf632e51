//! Configuration, ingestion, synthetic tasks and the command runner.

mod config;
mod ingest;
mod run;
mod tasks;

pub use config::{
    AdaptCommandConfig, ConstraintOverrides, FitCommandConfig, FloatFormat, IngestConfig, LinearSystemSpec, MetaCommandConfig,
    MfaEvalConfig, PlanCommandConfig, RunConfig, SimulateConfig, CONFIG_SCHEMA,
};
pub use ingest::{
    daily_from_cumulative, ingest_cases_csv, ingest_report_csv, parse_cases_csv, split_communities, splits_csv, CaseRow, CaseTable,
    CommunitySplit, County, DailySeries, SplitScheme,
};
pub use run::{
    error_json, reformat_csv, replay, resolve_output_dir, run, run_adapt, run_plan, sha256_hex, version_string, write_atomic, AdaptRow,
    Command, Manifest, OutputRecord, PlanOutcome, ReplayReport, MANIFEST_FILE, OUT_ENV,
};
pub use tasks::{make_synthetic_task, synthetic_hawkes, SyntheticSpec, SyntheticTask, Topology};
