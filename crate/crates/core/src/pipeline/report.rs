//! Report serialization.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::evaluation::ExperimentReport;
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Document,
    ScatterSvg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "document" => Ok(Self::Document),
            "scatter-svg" => Ok(Self::ScatterSvg),
            other => Err(invalid(format!("unknown report format {other:?} (expected table, document or scatter-svg)"))),
        }
    }
}

impl ReportFormat {
    pub fn file_name(&self) -> &'static str {
        match self {
            Self::Table => "report.csv",
            Self::Document => "report.json",
            Self::ScatterSvg => "scatter.svg",
        }
    }

    pub fn render(&self, report: &ExperimentReport) -> Result<String> {
        match self {
            Self::Table => report.to_table(),
            Self::Document => report.to_document(),
            Self::ScatterSvg => Ok(report.to_scatter_svg()),
        }
    }
}

/// Writes `report` in `format` under `dir` and returns the file path.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format.file_name());
    std::fs::write(&path, format.render(report)?)?;
    Ok(path)
}

/// Scatter data behind the SVG: one `(run_id, rmse, spearman)` row per run.
pub fn scatter_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "rmse", "spearman"])?;
    for r in &report.per_run {
        w.write_record([r.run_id.to_string(), r.rmse.to_string(), r.spearman.map(|s| s.to_string()).unwrap_or_default()])?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

pub fn write_report_files(report: &ExperimentReport, dir: &Path) -> Result<()> {
    for f in [ReportFormat::Document, ReportFormat::Table, ReportFormat::ScatterSvg] {
        emit_report(report, f, dir)?;
    }
    std::fs::write(dir.join("scatter.csv"), scatter_csv(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    io::read_json(path)
}
