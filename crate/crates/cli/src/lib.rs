//! Batch command-line surface: dataset generation, training, sampling,
//! ablation sweeps, cost reports and output verification.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{cmd_ablate, cmd_flops, cmd_gen_data, cmd_sample, cmd_train, cmd_verify, Layout};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use output::RunRecord;
