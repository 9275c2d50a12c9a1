//! Experiment harness: config files, run directories, plots and run
//! comparison. The `grpo` binary is a thin layer over this module.

pub mod compare;
pub mod config;
pub mod plot;
pub mod run;

pub use compare::{compare_runs, format_table};
pub use config::ExperimentConfig;
pub use plot::{write_plot, PlotKind};
pub use run::{check_bounds, exit_code, run_experiment, CheckBoundsOptions, Checkpoint};
