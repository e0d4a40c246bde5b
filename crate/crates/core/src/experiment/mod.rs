//! Configuration-driven experiment execution over synthetic tasks.

pub mod config;
pub mod runner;
pub mod tasks;

pub use config::ExperimentConfig;
pub use runner::{run_experiment, write_tables, RunArtifacts, ScoreRow};
pub use tasks::{generate, TaskConfig, TaskData, TaskKind};
