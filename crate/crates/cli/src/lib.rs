//! Configuration, command dispatch and report emission for `insiderlab`.

pub mod cli;
pub mod config;
pub mod dump;
pub mod error;
pub mod report;
pub mod run;

pub use cli::run_cli;
pub use config::{load_config, parse_config, RunConfig};
pub use error::{CliError, CliResult};
pub use report::{load_report, parse_report, RunReport};
pub use run::{run, Command};
