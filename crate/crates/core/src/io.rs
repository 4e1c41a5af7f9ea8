//! Plain-text numeric tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// 17 significant digits, enough to reproduce every f64 bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Shape(format!("line {line}: `{}` is not a number", field.trim())))
}

/// Two-column CSV with a header row.
pub fn columns_to_csv(header: (&str, &str), x: &[f64], y: &[f64]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (a, b) in x.iter().zip(y) {
        out.push_str(&fmt_f64(*a));
        out.push(',');
        out.push_str(&fmt_f64(*b));
        out.push('\n');
    }
    out
}

/// Parses a two-column CSV, skipping the header row.
pub fn csv_to_columns(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(Error::Shape(format!("line {}: expected two columns", n + 1))),
        };
        x.push(parse_f64(a, n + 1)?);
        y.push(parse_f64(b, n + 1)?);
    }
    Ok((x, y))
}

/// `out.csv` -> `out.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}
