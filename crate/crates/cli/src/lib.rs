//! Pipeline commands behind the `rlep` binary. Each command takes its parsed
//! flags and returns a summary; the binary only handles printing and exit
//! codes, so tests drive the same functions directly.

pub mod commands;
pub mod manifest;

pub use commands::{
    collect, gen_tasks, report, train_baseline, train_rlep, CliError, CollectArgs, CollectSummary,
    GenTasksArgs, ReportArgs, TrainArgs, TrainRlepArgs, TrainSummary,
};
pub use manifest::RunManifest;
