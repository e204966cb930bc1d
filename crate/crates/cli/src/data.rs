//! Time-series CSV (`t,x1,...,xK`) and the ground-truth sidecar written by
//! `simulate`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use gradmatch::simulator::{Dataset, SimConfig};
use gradmatch::TimeGrid;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const TRUTH_SCHEMA_VERSION: u32 = 1;

/// Observations on a time grid, states × times.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub grid: TimeGrid,
    pub values: DMatrix<f64>,
}

pub fn read_csv(path: &Path) -> CliResult<Series> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_csv(file, &path.display().to_string())
}

pub fn parse_csv<R: std::io::Read>(reader: R, origin: &str) -> CliResult<Series> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let err = |line: u64, msg: String| CliError::Input(format!("{origin}, line {line}: {msg}"));

    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let k = header.len().saturating_sub(1);
    if k == 0 {
        return Err(err(1, "header must be `t,x1,...,xK` with at least one state".into()));
    }
    for (i, name) in header.iter().enumerate() {
        let expected = if i == 0 { "t".to_string() } else { format!("x{i}") };
        if name != expected {
            return Err(err(1, format!("column {} is `{name}`, expected `{expected}`", i + 1)));
        }
    }

    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(k);
        for (i, field) in record.iter().enumerate() {
            if field.is_empty() {
                return Err(err(line, format!("missing value in column `{}`", &header[i])));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| err(line, format!("`{field}` in column `{}` is not a number", &header[i])))?;
            if !v.is_finite() {
                return Err(err(line, format!("non-finite value in column `{}`", &header[i])));
            }
            row.push(v);
        }
        if let Some(&prev) = times.last() {
            if row[0] <= prev {
                return Err(err(line, format!("time {} does not increase (previous {prev})", row[0])));
            }
        }
        times.push(row[0]);
        columns.push(row[1..].to_vec());
    }
    if times.len() < 2 {
        return Err(CliError::Input(format!("{origin}: need at least two rows, found {}", times.len())));
    }
    let grid = TimeGrid::new(times).map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    let values = DMatrix::from_fn(k, columns.len(), |s, t| columns[t][s]);
    Ok(Series { grid, values })
}

pub fn write_csv(path: &Path, grid: &TimeGrid, values: &DMatrix<f64>) -> CliResult<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=values.nrows()).map(|k| format!("x{k}")));
    wtr.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (j, t) in grid.times().iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(values.column(j).iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    wtr.flush().map_err(|e| CliError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e))
}

/// Everything needed to score a fit against the generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthDocument {
    pub schema_version: u32,
    pub model: String,
    pub simulation: SimConfig,
    pub times: Vec<f64>,
    /// Noise-free states, one row per state.
    pub states: Vec<Vec<f64>>,
}

impl TruthDocument {
    pub fn new(model: String, simulation: SimConfig, dataset: &Dataset) -> Self {
        TruthDocument {
            schema_version: TRUTH_SCHEMA_VERSION,
            model,
            simulation,
            times: dataset.grid.times().to_vec(),
            states: rows(dataset.truth.values()),
        }
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    let mut file = File::create(path).map_err(|e| CliError::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
