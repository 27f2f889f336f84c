use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hicontrast_cli::{pipeline_stages, run, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "hicontrast",
    version,
    about = "Localized defect modes in high-contrast periodic media"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. --set gaps.lambda_max=300 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.FIELD=VALUE")]
    set: Vec<String>,
    /// Base directory for run directories, replacing output.directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Dirichlet spectrum of the inclusion with eigenfunction means.
    InclusionSpectrum,
    /// Sweep of the spectral function beta.
    Beta,
    /// Gaps of the limit spectrum (where beta < 0).
    Gaps,
    /// Homogenized coefficient tensor of the matrix phase.
    Homogenize,
    /// Localized defect modes in the gaps.
    DefectModes,
    /// Fine-scale convergence study as epsilon decreases.
    ValidateEps,
    /// All of the above in order.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Pipeline => "pipeline",
            c => c.stage().expect("single stage").name(),
        }
    }

    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::InclusionSpectrum => Stage::InclusionSpectrum,
            Command::Beta => Stage::Beta,
            Command::Gaps => Stage::Gaps,
            Command::Homogenize => Stage::Homogenize,
            Command::DefectModes => Stage::DefectModes,
            Command::ValidateEps => Stage::ValidateEps,
            Command::Pipeline => return None,
        })
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let path = cli.config.ok_or_else(|| hicontrast::Error::Config {
        path: "--config".into(),
        message: "a configuration file is required".into(),
    })?;
    let config = RunConfig::load(&path, &cli.set)?;
    let stages = match cli.command.stage() {
        Some(s) => vec![s],
        None => pipeline_stages(&config),
    };
    let summary = run(&stages, &config, cli.command.name(), cli.out.as_deref())?;
    println!("run directory: {}", summary.directory.display());
    for (stage, line, files) in &summary.stages {
        println!("{}: {line}", stage.name());
        for f in files {
            println!("  {}", f.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<hicontrast::Error>() {
            Some(err) => {
                eprintln!("error [{}]: {err}", err.module());
                ExitCode::from(if err.is_config() { 2 } else { 3 })
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(3)
            }
        },
    }
}
