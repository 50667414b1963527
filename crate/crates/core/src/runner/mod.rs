//! Experiment grids, resumable execution and run records.

pub mod execute;
pub mod grid;
pub mod store;

pub use execute::{execute_grid, execute_one, ExecuteOptions, ExecuteSummary, Progress};
pub use grid::{derive_run_seed, expand_grid, AgentPairing, Cell, ConditionSpec, Grid, GridConfig, RunSpec, TreatmentName};
pub use store::{load_runs, read_manifest, LoadedRuns, Manifest, Mismatch, RunRecord, RunStatus};
