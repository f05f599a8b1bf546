//! Metrics, reports, checkpoints, ablations and the command line.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod metrics;
pub mod selftest;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use cli::cli_main;
pub use metrics::{avg_accuracy, forgetting, EvalReport};
