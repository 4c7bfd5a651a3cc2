//! CSV and JSON output for bench runs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::driver::{RunReport, RunStatus};
use super::microbench::MicroRow;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 10] = [
    "spec",
    "fraction",
    "dual_buffer",
    "status",
    "oracle_time_us",
    "dolma_time_us",
    "degradation",
    "peak_local_bytes",
    "local_reduction",
    "stall_us",
];

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub runs: Vec<RunReport>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("schema version {0} is not supported")]
    Schema(u32),
}

fn status(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "OK",
        RunStatus::Degenerate => "DEGENERATE",
    }
}

pub fn write_csv<W: Write>(runs: &[RunReport], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in runs {
        w.write_record([
            r.spec.clone(),
            r.config.fraction.to_string(),
            if r.config.dual_buffer { "on" } else { "off" }.to_string(),
            status(r.status).to_string(),
            format!("{:.3}", r.oracle_time_us),
            format!("{:.3}", r.dolma_time_us),
            format!("{:.6}", r.degradation),
            r.peak_local_bytes.to_string(),
            format!("{:.6}", r.local_reduction),
            format!("{:.3}", r.stall_us),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(runs: &[RunReport]) -> Result<String, ReportError> {
    Ok(serde_json::to_string_pretty(&ReportFile {
        schema_version: SCHEMA_VERSION,
        runs: runs.to_vec(),
    })?)
}

pub fn from_json(s: &str) -> Result<ReportFile, ReportError> {
    let f: ReportFile = serde_json::from_str(s)?;
    if f.schema_version != SCHEMA_VERSION {
        return Err(ReportError::Schema(f.schema_version));
    }
    Ok(f)
}

/// Writes `runs` to `path`, or to stdout when `path` is `None`.
pub fn emit_report(runs: &[RunReport], format: Format, path: Option<&Path>) -> Result<(), ReportError> {
    let mut out: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    match format {
        Format::Csv => write_csv(runs, &mut out)?,
        Format::Json => {
            out.write_all(to_json(runs)?.as_bytes())?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_micro_csv<W: Write>(rows: &[MicroRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "pattern", "size_bytes", "local_us", "remote_us", "slowdown"])?;
    for r in rows {
        w.write_record([
            r.kind.to_string(),
            r.pattern.to_string(),
            r.size_bytes.to_string(),
            format!("{:.3}", r.local_us),
            format!("{:.3}", r.remote_us),
            format!("{:.3}", r.slowdown),
        ])?;
    }
    w.flush()?;
    Ok(())
}
