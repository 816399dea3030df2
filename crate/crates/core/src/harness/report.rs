//! Report records and CSV tables written by the pipelines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub experiment: String,
    pub check: String,
    pub config_digest: String,
    pub pass: bool,
    /// Estimates, standard errors, slopes and tolerances.
    pub outputs: serde_json::Value,
}

/// Rectangular numeric output.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: &str, header: &[&str]) -> Self {
        Self {
            file: file.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Writes the table with a leading `config_digest` column.
    pub fn write(&self, dir: &Path, digest: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(&self.file)).map_err(csv_err)?;
        let mut head = vec!["config_digest".to_string()];
        head.extend(self.header.iter().cloned());
        w.write_record(&head).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(std::iter::once(digest).chain(r.iter().map(String::as_str)))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Machine-readable description of a failed run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
    pub experiment: Option<String>,
    pub config_digest: Option<String>,
}

impl ErrorReport {
    pub fn new(e: &Error, experiment: Option<&str>, digest: Option<&str>) -> Self {
        let kind = match e {
            Error::Dimension(_) => "dimension",
            Error::Argument(_) => "argument",
            Error::Evaluation { .. } => "evaluation",
            Error::Divergence { .. } => "divergence",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "config",
            Error::Fit(_) => "fit",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        };
        Self {
            kind: kind.to_string(),
            message: e.to_string(),
            experiment: experiment.map(str::to_string),
            config_digest: digest.map(str::to_string),
        }
    }
}
