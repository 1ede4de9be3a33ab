//! Plain CSV for matrices and label vectors: no header, comma-separated,
//! floats in shortest round-trip form so files are byte-stable.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub fn matrix_to_csv<T: Scalar>(m: &Matrix<T>) -> String {
    let mut out = String::new();
    for r in m.iter_rows() {
        for (c, x) in r.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{:?}", x.as_f64());
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv<T: Scalar>(text: &str) -> Result<Matrix<T>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map(T::of)
                    .map_err(|e| Error::Parse(format!("line {}: {f:?}: {e}", ln + 1)))
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse("no rows".into()));
    }
    Matrix::from_rows(&rows)
}

pub fn labels_to_csv(labels: &[usize]) -> String {
    let mut out = String::with_capacity(labels.len() * 2);
    for y in labels {
        let _ = writeln!(out, "{y}");
    }
    out
}

pub fn parse_labels_csv(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(ln, l)| l.trim().parse::<usize>().map_err(|e| Error::Parse(format!("line {}: {l:?}: {e}", ln + 1))))
        .collect()
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_matrix_csv(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_labels_csv(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}
