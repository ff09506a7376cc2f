//! Pipeline commands of the `sgdrive` binary: collect, balance, train,
//! eval and report, plus the key=value run configuration they share.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{balance, collect, eval, report, train, EvalPolicy, ReportOutput, Run, RunInfo, Trend};
pub use config::RunConfig;
pub use error::{CliError, Result};
