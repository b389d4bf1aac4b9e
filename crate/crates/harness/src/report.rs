use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use clap::ValueEnum;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::metrics::{improvement_per_channel, mean_improvement, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Sinusoid,
    Random,
    CartesianSquare,
    TeleopReplay,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Sinusoid => "sinusoid",
            ExperimentKind::Random => "random",
            ExperimentKind::CartesianSquare => "cartesian_square",
            ExperimentKind::TeleopReplay => "teleop_replay",
        }
    }
}

/// One block of per-channel metrics, one entry per controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub name: String,
    pub unit: String,
    pub channels: Vec<String>,
    /// Aligned with [`Report::controllers`].
    pub metrics: Vec<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: ExperimentKind,
    pub seed: u64,
    /// The first entry is the reference every improvement is measured against.
    pub controllers: Vec<String>,
    pub tables: Vec<MetricTable>,
    /// Scalar results keyed by dotted names, e.g. `improvement.joint.brnn.mean`.
    pub summary: BTreeMap<String, f64>,
    /// Error per refinement iteration, keyed by controller.
    pub ilc_history: BTreeMap<String, Vec<f64>>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&MetricTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn controller_index(&self, controller: &str) -> Option<usize> {
        self.controllers.iter().position(|c| c == controller)
    }

    pub fn metrics(&self, table: &str, controller: &str) -> Option<&Metrics> {
        let i = self.controller_index(controller)?;
        self.table(table)?.metrics.get(i)
    }

    /// Per-channel improvement of `controller` over the first controller.
    pub fn improvement(&self, table: &str, controller: &str) -> Option<Vec<f64>> {
        let t = self.table(table)?;
        let i = self.controller_index(controller)?;
        Some(improvement_per_channel(t.metrics.first()?, t.metrics.get(i)?))
    }

    pub fn mean_improvement(&self, table: &str, controller: &str) -> Option<f64> {
        let t = self.table(table)?;
        let i = self.controller_index(controller)?;
        Some(mean_improvement(t.metrics.first()?, t.metrics.get(i)?))
    }

    /// Fills `improvement.<table>.<controller>.{<channel>,mean}` for every
    /// non-reference controller.
    pub fn summarize_improvements(&mut self) {
        let mut out = Vec::new();
        for t in &self.tables {
            for c in self.controllers.iter().skip(1) {
                let per = self.improvement(&t.name, c).unwrap_or_default();
                for (ch, v) in t.channels.iter().zip(&per) {
                    out.push((format!("improvement.{}.{c}.{ch}", t.name), *v));
                }
                let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
                out.push((format!("improvement.{}.{c}.mean", t.name), mean));
            }
        }
        self.summary.extend(out);
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Json => "json",
        }
    }
}

fn io_err(e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: "<report>".into(),
        source: e,
    }
}

/// Writes `report` in `format`. JSON is lossless; CSV prints every float with
/// 17 significant digits.
pub fn emit_report(report: &Report, format: ReportFormat, out: &mut dyn Write) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Config(e.to_string()))?;
            writeln!(out, "{text}").map_err(io_err)
        }
        ReportFormat::Csv => write_csv(report, out).map_err(io_err),
        ReportFormat::Markdown => write_markdown(report, out).map_err(io_err),
    }
}

fn write_csv(report: &Report, out: &mut dyn Write) -> std::io::Result<()> {
    let mut header = vec!["table".to_string(), "channel".into(), "unit".into()];
    for c in &report.controllers {
        header.push(format!("{c}_l2"));
        header.push(format!("{c}_linf"));
    }
    writeln!(out, "{}", header.join(","))?;
    for t in &report.tables {
        for (i, ch) in t.channels.iter().enumerate() {
            let mut row = vec![t.name.clone(), ch.clone(), t.unit.clone()];
            for m in &t.metrics {
                row.push(format!("{:.16e}", m.l2[i]));
                row.push(format!("{:.16e}", m.linf[i]));
            }
            writeln!(out, "{}", row.join(","))?;
        }
    }
    Ok(())
}

fn write_markdown(report: &Report, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "# {} (seed {})", report.experiment.name(), report.seed)?;
    for t in &report.tables {
        writeln!(out, "\n## {} error\n", t.name)?;
        let mut head = vec!["Channel".to_string(), "Unit".into()];
        for c in &report.controllers {
            head.push(format!("{c} ℓ2"));
            head.push(format!("{c} ℓ∞"));
        }
        writeln!(out, "| {} |", head.join(" | "))?;
        writeln!(out, "|{}", "---|".repeat(head.len()))?;
        for (i, ch) in t.channels.iter().enumerate() {
            let mut row = vec![ch.clone(), t.unit.clone()];
            for m in &t.metrics {
                row.push(format!("{:.4e}", m.l2[i]));
                row.push(format!("{:.4e}", m.linf[i]));
            }
            writeln!(out, "| {} |", row.join(" | "))?;
        }
        if report.controllers.len() > 1 {
            writeln!(out, "\nImprovement over {} (ℓ2, %):\n", report.controllers[0])?;
            let others = &report.controllers[1..];
            writeln!(out, "| Channel | {} |", others.join(" | "))?;
            writeln!(out, "|{}", "---|".repeat(others.len() + 1))?;
            let per: Vec<Vec<f64>> = others
                .iter()
                .map(|c| report.improvement(&t.name, c).unwrap_or_default())
                .collect();
            for (i, ch) in t.channels.iter().enumerate() {
                let cells: Vec<String> = per.iter().map(|p| format!("{:.1}", p[i])).collect();
                writeln!(out, "| {ch} | {} |", cells.join(" | "))?;
            }
            let means: Vec<String> = per
                .iter()
                .map(|p| format!("{:.1}", p.iter().sum::<f64>() / p.len().max(1) as f64))
                .collect();
            writeln!(out, "| mean | {} |", means.join(" | "))?;
        }
    }
    let rest: Vec<_> = report
        .summary
        .iter()
        .filter(|(k, _)| !k.starts_with("improvement."))
        .collect();
    if !rest.is_empty() {
        writeln!(out, "\n## Summary\n")?;
        for (k, v) in rest {
            writeln!(out, "- {k}: {v:.6e}")?;
        }
    }
    Ok(())
}

/// A named time series, rows are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub sample_rate: f64,
    pub data: DMatrix<f64>,
}

/// One CSV per series: `t,c0,c1,…`, one row per sample.
pub fn write_series(dir: &Path, series: &[Series]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for s in series {
        let path = dir.join(format!("{}.csv", s.name));
        let file = std::fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
            let head: Vec<String> = (0..s.data.nrows()).map(|i| format!("c{i}")).collect();
            writeln!(w, "t,{}", head.join(","))?;
            for t in 0..s.data.ncols() {
                let cells: Vec<String> = s.data.column(t).iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(w, "{:.6},{}", t as f64 / s.sample_rate, cells.join(","))?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}
