//! Command line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, Format, Overrides};
use crate::dump::write_dumps;
use crate::error::{CliError, CliResult};
use crate::report::{load_report, RunReport};
use crate::run::{run, Command};

pub const REPORT_FILE: &str = "report.json";
pub const RESULTS_FILE: &str = "results.csv";

#[derive(Debug, Parser)]
#[command(name = "insiderlab", version, about = "Monte Carlo laboratory for insider trading under short-sale prohibition")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Run every configured analysis.
    Simulate,
    /// Density defects, supermartingale audits and stopping-time statistics.
    Diagnose,
    /// Relative-entropy objective of the perturbation family.
    Entropy,
    /// Short and long-only strategy audits.
    Backtest,
    /// Orthogonal-product and regime-switch checks.
    Factorization,
    /// Re-render a stored report.
    Report { file: PathBuf },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            paths: self.paths,
            steps: self.steps,
            out: self.out.clone(),
            threads: self.threads,
            format: self.format,
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> CliResult<i32> {
    let command = match &cli.command {
        Sub::Report { file } => return render(cli, file),
        Sub::Simulate => Command::Simulate,
        Sub::Diagnose => Command::Diagnose,
        Sub::Entropy => Command::Entropy,
        Sub::Backtest => Command::Backtest,
        Sub::Factorization => Command::Factorization,
    };
    let Some(path) = &cli.config else {
        return Err(CliError::Validation(vec![
            "--config <file> is required for this command".into(),
        ]));
    };
    let mut config = load_config(path)?;
    config.apply(&cli.overrides());
    let report = run(&config, command, None)?;
    let written = write_outputs(&report)?;
    println!("{}", report.summary());
    for p in written {
        println!("wrote {}", p.display());
    }
    for f in &report.consistency_failures {
        eprintln!("consistency failure: {f}");
    }
    Ok(report.exit_code())
}

/// Writes the report, results table and dumps into the configured directory.
pub fn write_outputs(report: &RunReport) -> CliResult<Vec<PathBuf>> {
    let config = &report.config;
    let dir = &config.output.directory;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    for f in &config.output.formats {
        let (name, body) = match f {
            Format::Json => (REPORT_FILE, report.to_json()),
            Format::Csv => (RESULTS_FILE, report.results_csv()?),
        };
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    written.extend(write_dumps(config, dir)?);
    Ok(written)
}

fn render(cli: &Cli, file: &Path) -> CliResult<i32> {
    let report = load_report(file)?;
    let body = match cli.format {
        Some(Format::Json) => report.to_json(),
        Some(Format::Csv) => report.results_csv()?,
        None => report.summary(),
    };
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let name = match cli.format {
            Some(Format::Csv) => RESULTS_FILE,
            Some(Format::Json) => REPORT_FILE,
            None => "summary.txt",
        };
        let path = dir.join(name);
        std::fs::write(&path, &body).map_err(|e| CliError::io(&path, e))?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{body}").map_err(|e| CliError::io("<stdout>", e))?;
    Ok(report.exit_code())
}
