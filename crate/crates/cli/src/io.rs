//! CSV input and output.

use std::fmt::Write as _;
use std::path::Path;

use hdgmm::numerics::Matrix;

use crate::CliError;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn input_error(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {msg}", path.display()))
}

/// Reads a headed CSV into strings, reporting malformed rows by line.
pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| input_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(input_error(path, "line 1: missing header row"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths {
                pos: Some(pos),
                expected_len,
                len,
            } => input_error(
                path,
                format!(
                    "line {}: expected {expected_len} fields, found {len}",
                    pos.line()
                ),
            ),
            _ => input_error(path, e),
        })?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(input_error(path, "no data rows"));
    }
    Ok(Table { header, rows })
}

fn parse_cell(path: &Path, line: usize, col: usize, cell: &str) -> Result<f64, CliError> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(input_error(
            path,
            format!("line {line}, column {}: invalid number '{cell}'", col + 1),
        )),
    }
}

/// Numeric matrix from a headed CSV; data rows start on line 2.
pub fn read_matrix(path: &Path) -> Result<Matrix, CliError> {
    let t = read_table(path)?;
    let cols = t.header.len();
    let mut data = Vec::with_capacity(t.rows.len() * cols);
    for (r, row) in t.rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            data.push(parse_cell(path, r + 2, c, cell)?);
        }
    }
    Matrix::from_vec(t.rows.len(), cols, data).map_err(|e| input_error(path, e))
}

/// Single-column numeric CSV.
pub fn read_vector(path: &Path) -> Result<Vec<f64>, CliError> {
    let m = read_matrix(path)?;
    if m.cols() != 1 {
        return Err(input_error(
            path,
            format!("expected one column, found {}", m.cols()),
        ));
    }
    Ok(m.col(0))
}

pub fn csv_string(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn markdown_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", header.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(s, "| {} |", r.join(" | "));
    }
    s
}

pub fn matrix_csv(names: &[String], m: &Matrix) -> String {
    let rows: Vec<Vec<String>> = (0..m.rows())
        .map(|i| m.row(i).iter().map(|&v| fmt_f64(v)).collect())
        .collect();
    csv_string(names, &rows)
}

pub fn write_output(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, content)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}
