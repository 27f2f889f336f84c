//! Configuration, stage orchestration and report emission for the
//! `hicontrast` command-line tool.

pub mod config;
pub mod report;
pub mod stages;

use std::path::{Path, PathBuf};

use hicontrast::Result;

pub use config::RunConfig;
pub use stages::{Session, Stage, StageOutput};

/// What a command produced.
pub struct RunSummary {
    pub directory: PathBuf,
    pub stages: Vec<(Stage, String, Vec<PathBuf>)>,
}

/// Runs the given stages in order in one session, so later stages reuse the
/// earlier results, and writes every stage report into a fresh run directory
/// under `out` (or `output.directory`).
pub fn run(stages: &[Stage], config: &RunConfig, command: &str, out: Option<&Path>) -> Result<RunSummary> {
    let mut session = Session::new(config);
    let outputs = stages.iter().map(|&s| session.run(s)).collect::<Result<Vec<_>>>()?;
    let base = out.unwrap_or(&config.output.directory);
    let directory = report::create_run_dir(base, command)?;
    report::write_config(&directory, config)?;
    let mut summary = RunSummary {
        directory: directory.clone(),
        stages: Vec::new(),
    };
    for o in &outputs {
        let files = report::write_stage(&directory, o, config)?;
        summary.stages.push((o.stage, o.summary.clone(), files));
    }
    Ok(summary)
}

/// Stages of the `pipeline` command for a configuration: every stage in
/// order, skipping the defect stages when the config has no defect section
/// and validation when it has no validation section.
pub fn pipeline_stages(config: &RunConfig) -> Vec<Stage> {
    Stage::ALL
        .into_iter()
        .filter(|&s| match s {
            Stage::DefectModes => config.defect.is_some(),
            Stage::ValidateEps => config.defect.is_some() && config.validation.is_some(),
            _ => true,
        })
        .collect()
}
