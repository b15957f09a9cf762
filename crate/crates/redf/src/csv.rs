//! Plain comma-separated files: a header of channel names, one timestep per row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use redf_core::data::Dataset;

use crate::error::{Result, RunError};

/// Channel names and a `C x T` row-major-by-channel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub rows: usize,
}

fn parse_cell(cell: &str) -> Option<f64> {
    let c = cell.trim();
    if c.is_empty() {
        return None;
    }
    match c.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v),
        _ => None,
    }
}

/// Parse a numeric table. Empty, `NaN`-like or unparsable cells are missing:
/// they take the previous timestep's value, or zero before any value is seen.
pub fn parse_table(text: &str, origin: &str) -> Result<Table> {
    let bad = |e: ::csv::Error| RunError::Data(format!("{origin}: {e}"));
    let mut reader = ::csv::ReaderBuilder::new().trim(::csv::Trim::All).from_reader(text.as_bytes());
    let names: Vec<String> = reader.headers().map_err(bad)?.iter().map(str::to_string).collect();
    if names.is_empty() {
        return Err(RunError::Data(format!("{origin}: empty file")));
    }
    let c = names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); c];
    let mut last: Vec<Option<f64>> = vec![None; c];
    for record in reader.records() {
        let record = record.map_err(bad)?;
        for (ch, cell) in record.iter().enumerate() {
            if let Some(v) = parse_cell(cell) {
                last[ch] = Some(v);
            }
            columns[ch].push(last[ch].unwrap_or(0.0));
        }
    }
    let rows = columns.first().map_or(0, Vec::len);
    Ok(Table { names, values: columns.concat(), rows })
}

pub fn format_table(names: &[String], values: &[f64], rows: usize) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for t in 0..rows {
        for c in 0..names.len() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", values[c * rows + t]);
        }
        out.push('\n');
    }
    out
}

/// A single 0/1 column, with or without a header line.
pub fn parse_labels(text: &str, origin: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.split(',').next().unwrap_or("").trim();
        if cell.is_empty() {
            continue;
        }
        match cell {
            "0" | "0.0" => out.push(0),
            "1" | "1.0" => out.push(1),
            _ if i == 0 && cell.parse::<f64>().is_err() => {}
            _ => return Err(RunError::Data(format!("{origin}: line {} label `{cell}` is not 0 or 1", i + 1))),
        }
    }
    Ok(out)
}

pub fn format_labels(labels: &[u8]) -> String {
    let mut out = String::from("label\n");
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    out
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RunError::io(path, e))
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| RunError::io(path, e))
}

pub const TRAIN: &str = "train.csv";
pub const TEST: &str = "test.csv";
pub const LABELS: &str = "test_label.csv";

/// Load `train.csv`, `test.csv` and `test_label.csv` from a directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let train_path = dir.join(TRAIN);
    let test_path = dir.join(TEST);
    let label_path = dir.join(LABELS);
    let train = parse_table(&read(&train_path)?, &train_path.display().to_string())?;
    let test = parse_table(&read(&test_path)?, &test_path.display().to_string())?;
    let labels = parse_labels(&read(&label_path)?, &label_path.display().to_string())?;
    if train.names.len() != test.names.len() {
        return Err(RunError::Data(format!("train has {} channels, test has {}", train.names.len(), test.names.len())));
    }
    let name = dir.file_name().map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Dataset::new(name, train.names, train.values, test.values, labels)?)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    write(&dir.join(TRAIN), &format_table(&ds.channel_names, &ds.train, ds.train_len))?;
    write(&dir.join(TEST), &format_table(&ds.channel_names, &ds.test, ds.test_len))?;
    write(&dir.join(LABELS), &format_labels(&ds.test_labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_fill_then_zero_fill() {
        let t = parse_table("a,b\n,1\n2,NaN\n,3\n", "x").unwrap();
        assert_eq!(t.rows, 3);
        assert_eq!(t.values, vec![0.0, 2.0, 2.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(parse_table("a,b\n1,2\n3\n", "x").is_err());
        assert!(parse_table("", "x").is_err());
    }

    #[test]
    fn labels_with_and_without_header() {
        assert_eq!(parse_labels("label\n0\n1\n", "x").unwrap(), vec![0, 1]);
        assert_eq!(parse_labels("0\n0\n1\n1\n0\n", "x").unwrap(), vec![0, 0, 1, 1, 0]);
        assert!(parse_labels("0\n2\n", "x").is_err());
    }

    #[test]
    fn table_round_trip_is_exact() {
        let names = vec!["x".to_string(), "y".to_string()];
        let values = vec![0.1, 1.0 / 3.0, -2.5e-300, 1e17, f64::MIN_POSITIVE, -0.0];
        let t = parse_table(&format_table(&names, &values, 3), "x").unwrap();
        assert_eq!(t.names, names);
        for (a, b) in t.values.iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
