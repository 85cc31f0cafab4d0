//! Column-oriented tables written as CSV or JSON.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::linalg::{Mat, Vector};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Bool(bool),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v}"),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<Cell>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j].clone()).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.columns)?;
        for row in &self.rows {
            out.write_record(row.iter().map(Cell::render))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Column names for a matrix-valued field: the bare name for 1×1, else `name_i_j`.
pub fn matrix_columns(name: &str, rows: usize, cols: usize) -> Vec<String> {
    if rows == 1 && cols == 1 {
        return vec![name.to_string()];
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(format!("{name}_{i}_{j}"));
        }
    }
    out
}

pub fn vector_columns(name: &str, len: usize) -> Vec<String> {
    if len == 1 {
        return vec![name.to_string()];
    }
    (0..len).map(|i| format!("{name}_{i}")).collect()
}

pub fn matrix_cells(m: &Mat) -> Vec<Cell> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(Cell::Num(m[(i, j)]));
        }
    }
    out
}

pub fn vector_cells(v: &Vector) -> Vec<Cell> {
    v.iter().map(|x| Cell::Num(*x)).collect()
}

pub fn empty_cells(n: usize) -> Vec<Cell> {
    vec![Cell::Empty; n]
}
