//! Report artifacts. `report.json` carries results and configuration only,
//! so repeated runs with the same seed are byte-identical; wall-clock
//! measurements go to `timing.json`, which is exempt from that guarantee.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const REPORT_SCHEMA: &str = "report/1";
pub const TIMING_SCHEMA: &str = "timing/1";

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub name: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub n_samples: usize,
    /// Runs aggregated into the mean (seeds or repeats).
    pub n_runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub methods: Vec<MethodReport>,
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunReport {
            schema: REPORT_SCHEMA,
            command: command.to_string(),
            seed,
            config,
            methods: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingEntry {
    pub name: String,
    pub seconds_total: f64,
    pub n_items: usize,
    pub seconds_per_item: f64,
}

#[derive(Debug, Default, Serialize)]
pub struct TimingReport {
    pub schema: &'static str,
    pub entries: Vec<TimingEntry>,
}

impl TimingReport {
    pub fn new() -> Self {
        TimingReport {
            schema: TIMING_SCHEMA,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, seconds_total: f64, n_items: usize) {
        self.entries.push(TimingEntry {
            name: name.to_string(),
            seconds_total,
            n_items,
            seconds_per_item: seconds_total / n_items.max(1) as f64,
        });
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("timing.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Writes a CSV file with a header row and float cells in shortest
/// round-trip form.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
