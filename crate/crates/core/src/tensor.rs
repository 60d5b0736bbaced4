//! Dense row-major `f64` matrices and the handful of numerical kernels the
//! rest of the crate is built on.
//!
//! Everything here is deliberately small: matrix products (backed by
//! `matrixmultiply`), row-wise activations, a normal-equations least-squares
//! solve with a pivot-ratio guard, a naive DFT, and a central-difference
//! gradient checker used to validate the hand-derived backward passes.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative pivot threshold below which an elimination is declared singular.
pub const PIVOT_RATIO_TOL: f64 = 1e-10;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = self.row(r);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:.6}")).collect();
            let tail = if self.cols > 8 { ", ..." } else { "" };
            writeln!(f, "  [{}{}]", shown.join(", "), tail)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// An n×1 column vector.
    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Standard product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(gemm(self, false, other, false))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(gemm(self, true, other, false))
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(gemm(self, false, other, true))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.ensure_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// In-place `self += alpha * other`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        self.ensure_same_shape(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_identity(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::Shape {
                op: "add_identity",
                left: self.shape(),
                right: (self.rows, self.rows),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += 1.0;
        }
        Ok(out)
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Max-norm of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Horizontal concatenation of blocks with equal row count.
    pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            if b.rows != rows {
                return Err(Error::Shape {
                    op: "hstack",
                    left: (rows, offset),
                    right: b.shape(),
                });
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + b.cols].copy_from_slice(b.row(r));
            }
            offset += b.cols;
        }
        Ok(out)
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Matrix> {
        if start + width > self.cols {
            return Err(Error::Shape {
                op: "column_block",
                left: self.shape(),
                right: (start, width),
            });
        }
        Ok(Matrix::from_fn(self.rows, width, |r, c| self.get(r, start + c)))
    }

    /// Rows `[start, start + height)` as a new matrix.
    pub fn row_block(&self, start: usize, height: usize) -> Result<Matrix> {
        if start + height > self.rows {
            return Err(Error::Shape {
                op: "row_block",
                left: self.shape(),
                right: (start, height),
            });
        }
        Ok(Matrix {
            rows: height,
            cols: self.cols,
            data: self.data[start * self.cols..(start + height) * self.cols].to_vec(),
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

fn gemm(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool) -> Matrix {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if trans_b { b.rows } else { b.cols };
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: strides describe exactly the row-major buffers above, and the
    // output buffer holds m×n elements with row stride n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eˣ)`, returning `x` directly above 30.
pub fn softplus(m: &Matrix) -> Matrix {
    m.map(softplus_scalar)
}

pub fn sigmoid(m: &Matrix) -> Matrix {
    m.map(sigmoid_scalar)
}

/// `softplus(m)` and `sigmoid(m)` sharing one exponential per entry.
pub fn softplus_and_sigmoid(m: &Matrix) -> (Matrix, Matrix) {
    let mut sp = Matrix::zeros(m.rows, m.cols);
    let mut sig = Matrix::zeros(m.rows, m.cols);
    for ((&x, s), g) in m.data.iter().zip(sp.data.iter_mut()).zip(sig.data.iter_mut()) {
        let e = (-x.abs()).exp();
        *s = x.max(0.0) + e.ln_1p();
        *g = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    }
    (sp, sig)
}

pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.hadamard(b)
}

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
///
/// Fails when a pivot drops below [`PIVOT_RATIO_TOL`] times the leading pivot.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n || b.rows != n {
        return Err(Error::Shape {
            op: "solve",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut lhs = a.clone();
    let mut rhs = b.clone();
    let m = rhs.cols;
    let mut leading = 0.0_f64;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| lhs[(i, col)].abs().total_cmp(&lhs[(j, col)].abs()))
            .unwrap_or(col);
        let pivot = lhs[(pivot_row, col)];
        if col == 0 {
            leading = pivot.abs();
        }
        let threshold = PIVOT_RATIO_TOL * leading;
        if !(pivot.abs() > threshold) || leading == 0.0 {
            return Err(Error::Singular {
                pivot: pivot.abs(),
                threshold,
            });
        }
        if pivot_row != col {
            for c in 0..n {
                lhs.data.swap(col * n + c, pivot_row * n + c);
            }
            for c in 0..m {
                rhs.data.swap(col * m + c, pivot_row * m + c);
            }
        }
        for r in (col + 1)..n {
            let factor = lhs[(r, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                lhs[(r, c)] -= factor * lhs[(col, c)];
            }
            for c in 0..m {
                rhs[(r, c)] -= factor * rhs[(col, c)];
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for row in (0..n).rev() {
        for c in 0..m {
            let mut acc = rhs[(row, c)];
            for k in (row + 1)..n {
                acc -= lhs[(row, k)] * x[(k, c)];
            }
            x[(row, c)] = acc / lhs[(row, row)];
        }
    }
    Ok(x)
}

/// Moore–Penrose pseudo-inverse `(ΦᵀΦ)⁻¹Φᵀ` of a full-column-rank matrix.
pub fn pinv(phi: &Matrix) -> Result<Matrix> {
    let gram = phi.matmul_tn(phi)?;
    solve(&gram, &phi.transpose())
}

/// Least-squares transfer operator `Φ_fcast (Φ_obsᵀΦ_obs)⁻¹ Φ_obsᵀ`.
///
/// `phi_obs` is L×k, `phi_fcast` is T×k; the result is T×L.
pub fn lstsq_pinv_apply(phi_obs: &Matrix, phi_fcast: &Matrix) -> Result<Matrix> {
    if phi_obs.cols != phi_fcast.cols {
        return Err(Error::Shape {
            op: "lstsq_pinv_apply",
            left: phi_obs.shape(),
            right: phi_fcast.shape(),
        });
    }
    phi_fcast.matmul(&pinv(phi_obs)?)
}

/// Numerical rank by Gaussian elimination with full pivoting.
///
/// Pivots below `rel_tol` times the largest entry count as zero.
pub fn rank(m: &Matrix, rel_tol: f64) -> usize {
    let mut a = m.clone();
    let (rows, cols) = a.shape();
    let scale = a.max_abs();
    if scale == 0.0 {
        return 0;
    }
    let tol = rel_tol * scale;
    let mut rank = 0;
    let mut col_perm: Vec<usize> = (0..cols).collect();
    for step in 0..rows.min(cols) {
        let mut best = (step, step, 0.0_f64);
        for r in step..rows {
            for c in step..cols {
                let v = a[(r, col_perm[c])].abs();
                if v > best.2 {
                    best = (r, c, v);
                }
            }
        }
        if best.2 <= tol {
            break;
        }
        let (pr, pc, _) = best;
        if pr != step {
            for c in 0..cols {
                a.data.swap(step * cols + c, pr * cols + c);
            }
        }
        col_perm.swap(step, pc);
        let pivot_col = col_perm[step];
        let pivot = a[(step, pivot_col)];
        for r in (step + 1)..rows {
            let factor = a[(r, pivot_col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in 0..cols {
                let v = a[(step, c)];
                a[(r, c)] -= factor * v;
            }
        }
        rank += 1;
    }
    rank
}

/// Full naive DFT `X_k = Σ_n x_n e^{-2πikn/N}`.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let step = std::f64::consts::TAU / n as f64;
    (0..n)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                // Reduce the phase index mod N before scaling for accuracy.
                let angle = step * ((k * t) % n) as f64;
                acc += Complex64::new(v * angle.cos(), -v * angle.sin());
            }
            acc
        })
        .collect()
}

/// Magnitudes of the first ⌈N/2⌉ DFT bins of a 1×N row.
pub fn dft_magnitude(row: &Matrix) -> Result<Matrix> {
    if row.rows != 1 {
        return Err(Error::Shape {
            op: "dft_magnitude",
            left: row.shape(),
            right: (1, row.cols),
        });
    }
    let bins = row.cols.div_ceil(2);
    let spectrum = dft(row.row(0));
    Ok(Matrix::row_vector(
        &spectrum.iter().take(bins).map(|z| z.norm()).collect::<Vec<_>>(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: (usize, usize),
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares an analytic gradient against central differences of `f` at
/// `point`, coordinate by coordinate.
///
/// The error at each coordinate is `|g − fd| / (|g| + |fd| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Matrix, analytic_grad: &Matrix, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    grad_check_with_floor(f, point, analytic_grad, step, 1e-12)
}

/// Like [`grad_check`] with denominator `max(|g| + |fd|, floor)`, so
/// coordinates whose gradient is below `floor` are judged on absolute error.
pub fn grad_check_with_floor<F>(
    mut f: F,
    point: &Matrix,
    analytic_grad: &Matrix,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("step must be positive, got {step}")));
    }
    point.ensure_same_shape(analytic_grad, "grad_check")?;
    let mut probe = point.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: (0, 0),
        step,
    };
    for idx in 0..point.data.len() {
        let base = point.data[idx];
        probe.data[idx] = base + step;
        let up = f(&probe)?;
        probe.data[idx] = base - step;
        let down = f(&probe)?;
        probe.data[idx] = base;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        let fd = (up - down) / (2.0 * step);
        let g = analytic_grad.data[idx];
        let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = (idx / point.cols, idx % point.cols);
        }
    }
    Ok(report)
}
