//! Machine-readable stage reports. Reports hold no timings or absolute
//! paths, so identical runs produce identical bytes.

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use std::path::Path;

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Report {
    pub format_version: u32,
    pub stage: &'static str,
    pub seed: u64,
    /// Files written by the stage, relative to the run directory.
    pub outputs: Vec<String>,
    pub metrics: Value,
}

impl Report {
    pub fn new(stage: &'static str, seed: u64, metrics: Value) -> Self {
        Report {
            format_version: REPORT_VERSION,
            stage,
            seed,
            outputs: Vec::new(),
            metrics,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
    }
}
