//! Example pools stored as CSV: header `f0,...,f{d-1},label`, one example per row.

use std::path::Path;

use fedselect_core::data::LabeledExample;

use crate::error::{Result, RunError};

pub fn load_csv_pool(path: &Path, num_classes: usize, input_dim: usize) -> Result<Vec<LabeledExample>> {
    let file = std::fs::File::open(path).map_err(|e| RunError::io(path, e))?;
    read_csv_pool(file, path, num_classes, input_dim)
}

/// Parses a pool from any reader; `path` only labels error messages.
pub fn read_csv_pool(
    reader: impl std::io::Read,
    path: &Path,
    num_classes: usize,
    input_dim: usize,
) -> Result<Vec<LabeledExample>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| RunError::format(path, e))?.clone();
    let expected: Vec<String> = (0..input_dim)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(RunError::format(
            path,
            format!("bad header, expected `{}`", expected.join(",")),
        ));
    }

    let mut pool = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| RunError::format(path, format!("row {row}: {e}")))?;
        let line = record.position().map_or(row as u64 + 2, |p| p.line());
        let at = |what: String| RunError::format(path, format!("row {row} (line {line}): {what}"));
        let mut features = Vec::with_capacity(input_dim);
        for (col, cell) in record.iter().take(input_dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| at(format!("column f{col} is not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(at(format!("column f{col} is not finite")));
            }
            features.push(v);
        }
        let cell = &record[input_dim];
        let label: usize = cell
            .trim()
            .parse()
            .map_err(|_| at(format!("label is not a class index: {cell:?}")))?;
        if label >= num_classes {
            return Err(at(format!("label {label} is out of range for {num_classes} classes")));
        }
        pool.push(LabeledExample { features, label });
    }
    Ok(pool)
}
