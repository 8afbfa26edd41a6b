use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Every constructor and every exposed operation rejects non-finite entries,
/// so a `Matrix` in hand never holds NaN or infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;
    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Self::checked(rows, cols, data, "Matrix::new")
    }

    fn checked(rows: usize, cols: usize, data: Vec<f64>, op: &'static str) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::checked(rows, cols, vec![value; rows * cols], "Matrix::filled")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::checked(rows.len(), cols, data, "Matrix::from_rows")
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Replaces a single entry. Fails on non-finite values.
    pub fn set(&mut self, r: usize, c: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite("Matrix::set"));
        }
        self.data[r * self.cols + c] = value;
        Ok(())
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Self::checked(self.rows, n, out, "matmul")
    }

    /// `self · otherᵀ` without materialising the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!(
                    "{}x{} times ({}x{})^T",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Self::checked(self.rows, other.rows, out, "matmul_t")
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!(
                    "({}x{})^T times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.cols * n];
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Self::checked(self.cols, n, out, "t_matmul")
    }

    /// Entrywise `self + alpha · other`.
    pub fn add_scaled(&self, other: &Matrix, alpha: f64) -> Result<Matrix> {
        self.same_shape(other, "add_scaled")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Self::checked(self.rows, self.cols, data, "add_scaled")
    }

    pub fn scale(&self, alpha: f64) -> Result<Matrix> {
        let data = self.data.iter().map(|a| a * alpha).collect();
        Self::checked(self.rows, self.cols, data, "scale")
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.add_scaled(other, -1.0)
    }

    /// Entrywise map; the closure must keep values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Matrix> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::checked(self.rows, self.cols, data, "map")
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Self::checked(self.rows, self.cols, data, "hadamard")
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row_vector(&self, bias: &[f64]) -> Result<Matrix> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row_vector",
                format!("bias of length {} for {} columns", bias.len(), self.cols),
            ));
        }
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Self::checked(self.rows, self.cols, data, "add_row_vector")
    }

    /// Column sums as a vector of length `cols`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), self.row(r)).sqrt()).collect()
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// One row per line, comma separated, no header. Values are written in
    /// shortest round-trip form so parsing restores them bit-for-bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 20);
        for r in 0..self.rows {
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`Matrix::to_csv`]. An empty input gives
    /// a 0x0 matrix.
    pub fn from_csv(text: &str) -> Result<Matrix> {
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut count = 0;
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    detail: format!("not a number: {field:?}"),
                })?;
                data.push(v);
                count += 1;
            }
            match cols {
                None => cols = Some(count),
                Some(c) if c != count => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        detail: format!("expected {c} fields, found {count}"),
                    })
                }
                _ => {}
            }
            rows += 1;
        }
        Matrix::new(rows, cols.unwrap_or(0), data)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Matrix> {
        Matrix::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_ij a_ij b_ij`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.same_shape(b, "frobenius_inner")?;
    Ok(dot(&a.data, &b.data))
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    dot(&a.data, &a.data).sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn add_scaled(a: &Matrix, b: &Matrix, alpha: f64) -> Result<Matrix> {
    a.add_scaled(b, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_times_m_is_m() {
        let a = m(&[&[1.0, -2.0, 3.5], &[0.25, 4.0, -1.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn row_times_column() {
        let got = m(&[&[1.0, 2.0]]).matmul(&m(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(got, m(&[&[11.0]]));
    }

    #[test]
    fn zero_annihilates() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::zeros(3, 2).matmul(&a).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = m(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, -3.0]]);
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
    }

    #[test]
    fn frobenius_examples() {
        let a = m(&[&[1.0, -2.0], &[3.0, 0.5]]);
        let self_inner = frobenius_inner(&a, &a).unwrap();
        assert!((self_inner - frobenius_norm(&a).powi(2)).abs() < 1e-12);
        let ones = m(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(frobenius_inner(&Matrix::identity(2), &ones).unwrap(), 2.0);
        assert_eq!(frobenius_inner(&a, &Matrix::zeros(2, 2)).unwrap(), 0.0);
        assert!(frobenius_inner(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn add_scaled_examples() {
        let a = m(&[&[1.0, 2.0]]);
        let b = m(&[&[-3.0, 7.0]]);
        assert_eq!(a.add_scaled(&b, 0.0).unwrap(), a);
        assert_eq!(Matrix::zeros(1, 2).add_scaled(&b, 1.0).unwrap(), b);
        assert_eq!(
            m(&[&[1.0]]).add_scaled(&m(&[&[2.0]]), -0.5).unwrap(),
            m(&[&[0.0]])
        );
        assert!(a.add_scaled(&Matrix::zeros(2, 1), 1.0).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        let big = m(&[&[1e300]]);
        assert!(matches!(big.matmul(&big), Err(Error::NonFinite(_))));
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn csv_is_exact() {
        let a = m(&[&[0.1, -1.0 / 3.0, 1e-300], &[12345.678, 0.0, -0.0]]);
        let text = a.to_csv();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(Matrix::from_csv(&text).unwrap(), a);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = Matrix::from_csv("1,2\n3,x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = Matrix::from_csv("1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
