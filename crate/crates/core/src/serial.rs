//! JSON and CSV encodings shared by checkpoints and exports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A matrix as `{rows, cols, values, bits}` with row-major decimal values and
/// the matching IEEE-754 bit patterns as 16-digit hex strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    #[serde(default)]
    pub bits: Vec<String>,
}

impl From<&Matrix> for MatrixDoc {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().to_vec(),
            bits: m.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
        }
    }
}

impl MatrixDoc {
    /// Rebuilds the matrix, preferring the bit patterns when present.
    pub fn decode(&self) -> Result<Matrix> {
        let n = self.rows * self.cols;
        let data = if self.bits.is_empty() {
            self.values.clone()
        } else {
            if self.bits.len() != n {
                return Err(Error::Parse(format!(
                    "expected {n} bit patterns, got {}",
                    self.bits.len()
                )));
            }
            self.bits
                .iter()
                .map(|b| {
                    u64::from_str_radix(b, 16)
                        .map(f64::from_bits)
                        .map_err(|e| Error::Parse(format!("bad bit pattern {b:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        Matrix::from_vec(self.rows, self.cols, data).map_err(|_| Error::Parse("matrix size mismatch".into()))
    }
}

/// Scientific notation with 18 significant digits; parses back bit-exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.17e}")
}

/// Row-major CSV with one matrix row per line.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{t:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows).map_err(|_| Error::Parse("ragged CSV rows".into()))
}
