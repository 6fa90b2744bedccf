//! CSV tables: header row, comma separator, LF line endings, floats with 17
//! significant digits.

use gmix::Dataset;

use crate::document::format_float;
use crate::error::{CliError, CliResult};

/// One table cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => format_float(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Renders a table to bytes.
pub fn render_table<H: AsRef<str>>(header: &[H], rows: &[Vec<Cell>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header.iter().map(|h| h.as_ref())).expect("in-memory write");
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(row.iter().map(Cell::render)).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Reads a numeric table with a header row into a dataset whose dimension
/// is the number of columns.
/// Numeric point table. A column headed `component` (the label column that
/// `sample` writes) is skipped, so draws can be fitted directly.
pub fn parse_points(bytes: &[u8]) -> CliResult<(Vec<String>, Dataset)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::parse(format!("header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let keep: Vec<bool> = header.iter().map(|h| h != LABEL_COLUMN).collect();
    let dim = keep.iter().filter(|&&k| k).count();
    if dim == 0 {
        return Err(CliError::validation("data file has no value columns"));
    }
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::parse(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(CliError::parse(format!(
                "line {line}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        for ((field, name), _) in rec.iter().zip(&header).zip(&keep).filter(|(_, &k)| k) {
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::parse(format!("line {line}, column `{name}`: `{field}` is not a number"))
            })?;
            if !v.is_finite() {
                return Err(CliError::parse(format!("line {line}, column `{name}`: non-finite value")));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(CliError::validation("data file has no rows"));
    }
    let data = Dataset::new(dim, values)?;
    let header = header.into_iter().filter(|h| h != LABEL_COLUMN).collect();
    Ok((header, data))
}

const LABEL_COLUMN: &str = "component";
