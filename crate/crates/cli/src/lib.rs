//! Config-driven experiment runner for the `qfbsde` solver.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod plotdata;
pub mod presets;
pub mod validate;

pub use config::ExperimentConfig;
pub use manifest::RunManifest;
pub use pipeline::{run, run_config, RunError, RunOptions};
pub use plotdata::{emit_plot_data, plot_data_from};
pub use validate::{validate, ValidationReport};
