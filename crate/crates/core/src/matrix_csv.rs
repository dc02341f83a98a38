//! Plain-text matrix format: a `rows,cols` header line followed by the
//! entries in row-major order, one comma-separated line per row.
//!
//! Bundles hold several named matrices; each block starts with a `[name]`
//! line. Scalars are stored as 1x1 matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_matrix(out: &mut String, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{},{}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_f64(m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
}

pub fn matrix_to_string(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    write_matrix(&mut s, m);
    s
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut parts = line.trim().split(',');
    let mut next = || -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad matrix header `{line}`")))
    };
    let r = next()?;
    let c = next()?;
    Ok((r, c))
}

fn parse_rows<'a>(lines: &mut impl Iterator<Item = &'a str>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("expected {rows} rows, found {i}")))?;
        let vals: Vec<f64> = if cols == 0 {
            Vec::new()
        } else {
            line.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{v}`"))))
                .collect::<Result<_>>()?
        };
        if vals.len() != cols {
            return Err(Error::Parse(format!("row {i} has {} entries, expected {cols}", vals.len())));
        }
        data.extend(vals);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty matrix file".into()))?;
    let (r, c) = parse_header(header)?;
    parse_rows(&mut lines, r, c)
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, matrix_to_string(m))?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix(&fs::read_to_string(path)?)
}

/// Ordered collection of named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixBundle {
    entries: Vec<(String, DMatrix<f64>)>,
}

impl MatrixBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, m: DMatrix<f64>) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = m;
        } else {
            self.entries.push((name, m));
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, DMatrix::from_element(1, 1, v));
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Parse(format!("missing matrix `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let m = self.get(name)?;
        if m.shape() != (1, 1) {
            return Err(Error::Parse(format!("`{name}` is not a scalar")));
        }
        Ok(m[(0, 0)])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, m) in &self.entries {
            let _ = writeln!(s, "[{name}]");
            write_matrix(&mut s, m);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut bundle = MatrixBundle::new();
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        while let Some(line) = lines.next() {
            let line = line.trim();
            let name = line
                .strip_prefix('[')
                .and_then(|l| l.strip_suffix(']'))
                .ok_or_else(|| Error::Parse(format!("expected `[name]`, found `{line}`")))?;
            let header = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing header for `{name}`")))?;
            let (r, c) = parse_header(header)?;
            let m = parse_rows(&mut lines, r, c)?;
            bundle.insert(name, m);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
