//! Dense real matrices and vectors, fixed-point quantization, and the
//! small amount of digital linear algebra the rest of the crate needs.
//!
//! Everything here runs in `f64`. Matrices are row-major; vectorization
//! is column-stacking so that `vec(B X Aᵀ) = (A ⊗ B) vec(X)`.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::dims("Matrix::new", "positive shape", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::new", rows * cols, data.len()));
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|row| row.len() != c) {
            return Err(Error::dims("Matrix::from_rows", c, bad.len()));
        }
        Matrix::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vector {
        Vector {
            data: (0..self.rows).map(|i| self[(i, j)]).collect(),
        }
    }

    pub fn set_column(&mut self, j: usize, v: &Vector) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims(
                "matmul",
                format!("{} rows", self.cols),
                format!("{} rows", rhs.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &r) in orow.iter_mut().zip(rrow) {
                    *o += a * r;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(op, fmt_shape(self.shape()), fmt_shape(rhs.shape())));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + shift·I`.
    pub fn add_diagonal(&self, shift: f64) -> Matrix {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += shift;
        }
        m
    }

    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn hstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::dims("hstack", self.rows, rhs.rows));
        }
        let cols = self.cols + rhs.cols;
        Ok(Matrix::from_fn(self.rows, cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                rhs[(i, j - self.cols)]
            }
        }))
    }

    pub fn vstack(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::dims("vstack", self.cols, rhs.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&rhs.data);
        Ok(Matrix {
            rows: self.rows + rhs.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::dims("Vector::new", "positive length", 0));
        }
        check_finite(&data)?;
        Ok(Vector { data })
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "vector length must be positive");
        Vector { data: vec![0.0; len] }
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm_2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, rhs: &Vector) -> Result<Vector> {
        if self.len() != rhs.len() {
            return Err(Error::dims("Vector::add", self.len(), rhs.len()));
        }
        Ok(Vector {
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, rhs: &Vector) -> Result<Vector> {
        if self.len() != rhs.len() {
            return Err(Error::dims("Vector::sub", self.len(), rhs.len()));
        }
        Ok(Vector {
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn as_column(&self) -> Matrix {
        Matrix {
            rows: self.len(),
            cols: 1,
            data: self.data.clone(),
        }
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vector{:?}", self.data)
    }
}

/// Two's-complement fixed-point format over `[-1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct FixedPointSpec {
    total_bits: u32,
}

impl FixedPointSpec {
    pub const MAX_BITS: u32 = 64;

    pub fn new(total_bits: u32) -> Result<Self> {
        if !(2..=Self::MAX_BITS).contains(&total_bits) {
            return Err(Error::InvalidArgument(format!(
                "fixed-point width must be in 2..={}, got {total_bits}",
                Self::MAX_BITS
            )));
        }
        Ok(FixedPointSpec { total_bits })
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    /// Grid step, `2^-(bits-1)`.
    pub fn tolerance(&self) -> f64 {
        (-(f64::from(self.total_bits) - 1.0)).exp2()
    }
}

impl TryFrom<u32> for FixedPointSpec {
    type Error = Error;
    fn try_from(bits: u32) -> Result<Self> {
        FixedPointSpec::new(bits)
    }
}

impl From<FixedPointSpec> for u32 {
    fn from(spec: FixedPointSpec) -> u32 {
        spec.total_bits
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quantized {
    pub value: f64,
    pub saturated: bool,
}

/// Rounds `x` to the nearest point of the fixed-point grid (ties to even),
/// saturating at `-1` and `1 - step`.
pub fn quantize_fixed(x: f64, spec: FixedPointSpec) -> Quantized {
    let step = spec.tolerance();
    let lo = -1.0;
    let hi = 1.0 - step;
    if x.is_nan() {
        return Quantized { value: 0.0, saturated: true };
    }
    let rounded = (x / step).round_ties_even() * step;
    let value = rounded.clamp(lo, hi);
    Quantized {
        value,
        saturated: value != rounded || x >= 1.0 || x < -1.0,
    }
}

pub fn mvm(a: &Matrix, x: &Vector) -> Result<Vector> {
    if a.cols() != x.len() {
        return Err(Error::dims("mvm", a.cols(), x.len()));
    }
    Ok(Vector {
        data: (0..a.rows())
            .map(|i| a.row(i).iter().zip(x.as_slice()).map(|(p, q)| p * q).sum())
            .collect(),
    })
}

/// `‖v - v*‖₂ / ‖v*‖₂`.
pub fn relative_error(v: &Vector, v_star: &Vector) -> Result<f64> {
    if v.len() != v_star.len() {
        return Err(Error::dims("relative_error", v_star.len(), v.len()));
    }
    let denom = v_star.norm_2();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric);
    }
    Ok(v.sub(v_star)?.norm_2() / denom)
}

/// Column-stacking `vec` operator.
pub fn vectorize(m: &Matrix) -> Vector {
    Vector {
        data: m.transpose().data,
    }
}

pub fn unvectorize(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 || v.len() != rows * cols {
        return Err(Error::dims("unvectorize", rows * cols, v.len()));
    }
    let t = Matrix {
        rows: cols,
        cols: rows,
        data: v.data.clone(),
    };
    Ok(t.transpose())
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Returns `None` when a pivot is exactly zero.
    pub fn factor(a: &Matrix) -> Option<Lu> {
        assert!(a.is_square(), "LU requires a square matrix");
        let n = a.rows();
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[i * n + k].abs().total_cmp(&lu[j * n + k].abs()))
                .unwrap_or(k);
            if lu[p * n + k] == 0.0 {
                return None;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Some(Lu { n, lu, perm })
    }

    pub fn solve_slice(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * y[j]).sum();
            y[i] = (y[i] - s) / self.lu[i * n + i];
        }
        y
    }

    pub fn solve(&self, b: &Vector) -> Vector {
        assert_eq!(b.len(), self.n);
        Vector {
            data: self.solve_slice(b.as_slice()),
        }
    }

    pub fn solve_matrix(&self, b: &Matrix) -> Matrix {
        assert_eq!(b.rows(), self.n);
        let mut out = Matrix::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            out.set_column(j, &self.solve(&b.column(j)));
        }
        out
    }

    pub fn inverse(&self) -> Matrix {
        self.solve_matrix(&Matrix::identity(self.n))
    }
}

/// 1-norm condition number `‖A‖₁‖A⁻¹‖₁`; infinite when singular.
pub fn condition_1(a: &Matrix) -> f64 {
    match Lu::factor(a) {
        Some(lu) => {
            let c = a.norm_1() * lu.inverse().norm_1();
            if c.is_finite() {
                c
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    }
}

/// Dense digital solve of `A X = B`.
pub fn solve_dense(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(Error::dims("solve_dense", fmt_shape(a.shape()), fmt_shape(b.shape())));
    }
    let lu = Lu::factor(a).ok_or_else(|| Error::InvalidArgument("singular matrix".into()))?;
    Ok(lu.solve_matrix(b))
}
