//! CSV trajectories and flat `key=value` metadata files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// One row of a trajectory CSV. `grid` is −1 for flat bundles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub neg_log_snr: f64,
    pub grid: i64,
}

pub const TRAJECTORY_HEADER: [&str; 3] = ["iteration", "neg_log_snr", "grid"];

pub fn flat_rows(values: &[f64]) -> Vec<TrajectoryRow> {
    values
        .iter()
        .enumerate()
        .map(|(iteration, &neg_log_snr)| TrajectoryRow {
            iteration,
            neg_log_snr,
            grid: -1,
        })
        .collect()
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    for r in rows {
        w.write_record(&[r.iteration.to_string(), format_f64(r.neg_log_snr), r.grid.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(TRAJECTORY_HEADER) {
        return Err(Error::Format(format!("{}: unexpected trajectory header", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = || Error::Format(format!("{}: bad row {:?}", path.display(), rec));
        out.push(TrajectoryRow {
            iteration: field(0).parse().map_err(|_| bad())?,
            neg_log_snr: field(1).parse().map_err(|_| bad())?,
            grid: field(2).parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Writes a generic CSV table.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::mismatch("write_table", header.len(), row.len()));
        }
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_key_values(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for (k, v) in pairs {
        writeln!(f, "{k}={v}")?;
    }
    Ok(())
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>> {
    parse_key_values(&fs::read_to_string(path)?)
}
