//! The `gmm/1` text format.
//!
//! ```text
//! format_version gmm/1
//! name sheet width
//! unit mm
//! note fitted from batch 12
//! dim 2
//! components 1
//! component 0
//! weight 1.0000000000000000e0
//! mean 0.0000000000000000e0 0.0000000000000000e0
//! cov 1.0000000000000000e0 0.0000000000000000e0 0.0000000000000000e0 1.0000000000000000e0
//! ```
//!
//! Fields appear in exactly this order; `name`, `unit` and `note` are
//! optional and `note` may repeat. Covariances are written row-major. Every
//! float is printed with 17 significant digits so a parsed value is
//! bit-identical to the serialized one. Lines starting with `#` and blank
//! lines are ignored on input but never written.

use std::fmt::{self, Write as _};

use gmix::{GmmError, GmmParams, RawMixture};
use nalgebra::{DMatrix, DVector};

pub const FORMAT_VERSION: &str = "gmm/1";

/// A mixture with optional descriptive metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmDocument {
    pub params: GmmParams,
    pub name: Option<String>,
    pub unit: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DocumentError {
    /// The text does not follow the grammar.
    Malformed { line: usize, field: String, message: String },
    /// The header names a format this reader does not understand.
    UnsupportedVersion { found: String },
    /// Well-formed text describing an invalid mixture.
    Invalid(GmmError),
}

impl fmt::Display for DocumentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Malformed { line, field, message } => {
                write!(f, "line {line}, field `{field}`: {message}")
            }
            Self::UnsupportedVersion { found } => {
                write!(f, "unsupported format version `{found}` (expected `{FORMAT_VERSION}`)")
            }
            Self::Invalid(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DocumentError {}

/// Float text that parses back to the same bits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl GmmDocument {
    pub fn new(params: GmmParams) -> Self {
        Self {
            params,
            name: None,
            unit: None,
            notes: Vec::new(),
        }
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let p = &self.params;
        let d = p.dim();
        writeln!(out, "format_version {FORMAT_VERSION}").unwrap();
        if let Some(name) = &self.name {
            writeln!(out, "name {name}").unwrap();
        }
        if let Some(unit) = &self.unit {
            writeln!(out, "unit {unit}").unwrap();
        }
        for note in &self.notes {
            writeln!(out, "note {note}").unwrap();
        }
        writeln!(out, "dim {d}").unwrap();
        writeln!(out, "components {}", p.len()).unwrap();
        for (i, c) in p.components().iter().enumerate() {
            writeln!(out, "component {i}").unwrap();
            writeln!(out, "weight {}", format_float(c.weight())).unwrap();
            let mean: Vec<String> = c.mean().iter().map(|v| format_float(*v)).collect();
            writeln!(out, "mean {}", mean.join(" ")).unwrap();
            let cov = c.covariance();
            let cells: Vec<String> = (0..d)
                .flat_map(|r| (0..d).map(move |col| (r, col)))
                .map(|(r, col)| format_float(cov[(r, col)]))
                .collect();
            writeln!(out, "cov {}", cells.join(" ")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DocumentError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .peekable();
        let mut reader = Reader { last_line: 0 };

        let (line, version) = reader.field(&mut lines, "format_version")?;
        if version.trim() != FORMAT_VERSION {
            if version.trim().starts_with("gmm/") {
                return Err(DocumentError::UnsupportedVersion {
                    found: version.trim().to_string(),
                });
            }
            return Err(malformed(line, "format_version", format!("unrecognized header `{version}`")));
        }
        let mut doc_name = None;
        let mut unit = None;
        let mut notes = Vec::new();
        while let Some(&(_, l)) = lines.peek() {
            let (key, rest) = split_key(l);
            match key {
                "name" if doc_name.is_none() && notes.is_empty() && unit.is_none() => doc_name = Some(rest.to_string()),
                "unit" if unit.is_none() && notes.is_empty() => unit = Some(rest.to_string()),
                "note" => notes.push(rest.to_string()),
                _ => break,
            }
            lines.next();
        }
        let (line, v) = reader.field(&mut lines, "dim")?;
        let dim = parse_count(line, "dim", v)?;
        if dim == 0 {
            return Err(malformed(line, "dim", "dimension must be positive".into()));
        }
        let (line, v) = reader.field(&mut lines, "components")?;
        let k = parse_count(line, "components", v)?;
        if k == 0 {
            return Err(malformed(line, "components", "at least one component is required".into()));
        }
        let mut raw = RawMixture {
            weights: Vec::with_capacity(k),
            means: Vec::with_capacity(k),
            covariances: Vec::with_capacity(k),
        };
        for i in 0..k {
            let (line, v) = reader.field(&mut lines, "component")?;
            if parse_count(line, "component", v)? != i {
                return Err(malformed(line, "component", format!("expected component index {i}")));
            }
            let (line, v) = reader.field(&mut lines, "weight")?;
            let w = parse_floats(line, "weight", v, 1)?;
            raw.weights.push(w[0]);
            let (line, v) = reader.field(&mut lines, "mean")?;
            raw.means.push(DVector::from_vec(parse_floats(line, "mean", v, dim)?));
            let (line, v) = reader.field(&mut lines, "cov")?;
            let cells = parse_floats(line, "cov", v, dim * dim)?;
            raw.covariances.push(DMatrix::from_row_slice(dim, dim, &cells));
        }
        if let Some((line, l)) = lines.next() {
            let (key, _) = split_key(l);
            return Err(malformed(line, key, "unexpected content after the last component".into()));
        }
        let params = GmmParams::from_raw(&raw).map_err(DocumentError::Invalid)?;
        Ok(Self {
            params,
            name: doc_name,
            unit,
            notes,
        })
    }
}

struct Reader {
    last_line: usize,
}

impl Reader {
    fn field<'a, I>(&mut self, lines: &mut I, key: &str) -> Result<(usize, &'a str), DocumentError>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        match lines.next() {
            Some((line, l)) => {
                self.last_line = line;
                let (k, rest) = split_key(l);
                if k != key {
                    return Err(malformed(line, key, format!("expected `{key}`, found `{k}`")));
                }
                Ok((line, rest))
            }
            None => Err(malformed(self.last_line + 1, key, "unexpected end of document".into())),
        }
    }
}

fn split_key(l: &str) -> (&str, &str) {
    match l.split_once(' ') {
        Some((k, rest)) => (k, rest),
        None => (l, ""),
    }
}

fn malformed(line: usize, field: &str, message: String) -> DocumentError {
    DocumentError::Malformed {
        line,
        field: field.to_string(),
        message,
    }
}

fn parse_count(line: usize, field: &str, v: &str) -> Result<usize, DocumentError> {
    v.trim()
        .parse()
        .map_err(|_| malformed(line, field, format!("`{}` is not a nonnegative integer", v.trim())))
}

fn parse_floats(line: usize, field: &str, v: &str, expected: usize) -> Result<Vec<f64>, DocumentError> {
    let vals = v
        .split_whitespace()
        .map(|t| match t.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(malformed(line, field, format!("`{t}` is not a finite number"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if vals.len() != expected {
        return Err(malformed(
            line,
            field,
            format!("expected {expected} values, found {}", vals.len()),
        ));
    }
    Ok(vals)
}
