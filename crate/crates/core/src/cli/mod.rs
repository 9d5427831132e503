//! Experiment orchestration: config files, output directories, resume.
//!
//! An output directory holds `config.toml`, `model.cric`, one `.cric`/`.meta`
//! pair per snapshot, `series.csv`, the diagnostics (`report.txt` plus one
//! `diag_<name>.csv` per table) and a `MANIFEST` with FNV-1a checksums. The
//! manifest is written last; a directory without one is mid-write.

mod config;
mod experiment;
pub mod store;

pub use config::{
    parse_config, CheckKind, DiagnosticsSection, ExperimentConfig, FlowSection, ModelKind, ModelSection, OutputSection,
};
pub use experiment::{
    check, evaluate, initial_state, load_config, open, oracle, resume, run_experiment, Outcome, ResumeOverrides,
};
