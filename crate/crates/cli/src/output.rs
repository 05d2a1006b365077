//! Writing reports: CSV tables, the JSON report, and a run manifest.
//!
//! Data files depend only on the resolved config; wall-clock times go into
//! `manifest.json` alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::pipelines::{Report, Table};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
    pub pass: bool,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.schema_version != SCHEMA_VERSION {
            anyhow::bail!("manifest schema_version {} is not supported", m.schema_version);
        }
        Ok(m)
    }
}

pub fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn write_table(dir: &Path, t: &Table) -> Result<PathBuf> {
    let path = dir.join(&t.name);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_path(&path)?;
    w.write_record(&t.header)?;
    for row in &t.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(path)
}

/// Writes every artifact of `report` into `dir` and returns the manifest.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, report: &Report, started_unix_ms: u128) -> Result<Manifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut outputs = Vec::new();
    for t in &report.tables {
        write_table(dir, t)?;
        outputs.push(t.name.clone());
    }
    let name = format!("{}_report.json", report.command.replace('-', "_"));
    fs::write(dir.join(&name), serde_json::to_string_pretty(&report.json)? + "\n")?;
    outputs.push(name);
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    outputs.push("config.json".into());
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: report.command.clone(),
        config: cfg.clone(),
        outputs,
        pass: report.pass,
        started_unix_ms,
        finished_unix_ms: unix_ms(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
