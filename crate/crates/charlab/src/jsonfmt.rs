//! Fixed-width JSON float formatting for model files.
//!
//! Model parameters are written with 17 significant digits, enough to make
//! the decimal form round-trip to the exact same f64 bits on reload. The
//! writer side is hand-rolled so the representation is pinned down;
//! reading goes through serde_json, whose float parsing is correctly
//! rounded.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// 17 significant digits: one leading digit plus 16 after the point.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn push_f64_array(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{}", fmt_f64(*x));
    }
    out.push(']');
}

/// Matrix as an array of row arrays (row-major).
pub fn push_matrix(out: &mut String, m: &Matrix) {
    out.push('[');
    for r in 0..m.rows() {
        if r > 0 {
            out.push(',');
        }
        push_f64_array(out, m.row(r));
    }
    out.push(']');
}

pub fn parse_f64_array(v: &serde_json::Value, field: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::ModelFile(format!("field {field:?} is not an array")))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .ok_or_else(|| Error::ModelFile(format!("field {field:?} has a non-numeric entry")))
        })
        .collect()
}

pub fn parse_vector(v: &serde_json::Value, field: &str, len: usize) -> Result<Vector> {
    let xs = parse_f64_array(v, field)?;
    if xs.len() != len {
        return Err(Error::ModelFile(format!(
            "field {field:?} has length {}, expected {len}",
            xs.len()
        )));
    }
    Ok(Vector::new(xs))
}

pub fn parse_matrix(v: &serde_json::Value, field: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::ModelFile(format!("field {field:?} is not an array")))?;
    if arr.len() != rows {
        return Err(Error::ModelFile(format!(
            "field {field:?} has {} rows, expected {rows}",
            arr.len()
        )));
    }
    let mut out = Matrix::zeros(rows, cols);
    for (r, row) in arr.iter().enumerate() {
        let xs = parse_f64_array(row, field)?;
        if xs.len() != cols {
            return Err(Error::ModelFile(format!(
                "field {field:?} row {r} has {} columns, expected {cols}",
                xs.len()
            )));
        }
        out.row_mut(r).copy_from_slice(&xs);
    }
    Ok(out)
}

pub fn get<'a>(v: &'a serde_json::Value, field: &str) -> Result<&'a serde_json::Value> {
    v.get(field)
        .ok_or_else(|| Error::ModelFile(format!("missing field {field:?}")))
}

pub fn get_usize(v: &serde_json::Value, field: &str) -> Result<usize> {
    get(v, field)?
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::ModelFile(format!("field {field:?} is not an unsigned integer")))
}

pub fn get_str<'a>(v: &'a serde_json::Value, field: &str) -> Result<&'a str> {
    get(v, field)?
        .as_str()
        .ok_or_else(|| Error::ModelFile(format!("field {field:?} is not a string")))
}
