//! Report files: one JSON envelope and a set of CSV tables per stage, in a
//! fresh timestamped run directory.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use hicontrast::Result;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Format, RunConfig};
use crate::stages::StageOutput;

/// Creates `<base>/<timestamp>-<command>`, adding a numeric suffix if it
/// already exists. Existing directories are never reused.
pub fn create_run_dir(base: &Path, command: &str) -> Result<PathBuf> {
    fs::create_dir_all(base)?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f");
    let stem = format!("{stamp}-{command}");
    for k in 0.. {
        let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
        let path = base.join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("the suffix search always terminates")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The JSON document of a stage: command, resolved config, result and the
/// SHA-256 of the canonical serialization of those three.
pub fn envelope(output: &StageOutput, config: &RunConfig) -> serde_json::Value {
    let body = json!({
        "command": output.stage.name(),
        "config": serde_json::to_value(config).expect("configs serialize to JSON"),
        "result": output.result,
    });
    let hash = sha256_hex(&serde_json::to_vec(&body).expect("values serialize"));
    let mut doc = body;
    doc["content_hash"] = json!(hash);
    doc
}

/// Writes the stage report into `dir` and returns the written paths.
/// CSV tables start with comment lines carrying the config hash and the
/// hash of the table body.
pub fn write_stage(dir: &Path, output: &StageOutput, config: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let name = output.stage.name();
    if config.output.formats.contains(&Format::Json) {
        let path = dir.join(format!("{name}.json"));
        let mut text = serde_json::to_string_pretty(&envelope(output, config)).expect("values serialize");
        text.push('\n');
        fs::write(&path, text)?;
        written.push(path);
    }
    if config.output.formats.contains(&Format::Csv) {
        let config_hash = sha256_hex(config.to_toml().as_bytes());
        for (file, body) in &output.tables {
            let path = dir.join(file);
            let text = format!(
                "# command = {name}\n# config_sha256 = {config_hash}\n# content_sha256 = {}\n{body}",
                sha256_hex(body.as_bytes())
            );
            fs::write(&path, text)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Writes the resolved configuration next to the reports.
pub fn write_config(dir: &Path, config: &RunConfig) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml())?;
    Ok(path)
}
