//! Small dense factorizations used by tests and property checks.

use super::{gaussian_sample, Matrix, RngStream};
use crate::error::{Error, Result};

/// Q factor of a QR decomposition by modified Gram-Schmidt with one
/// re-orthogonalization pass. `a` must be square with full rank.
pub fn qr_orthogonal(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("qr_orthogonal", "matrix must be square"));
    }
    // Work on columns of `a` stored as rows of the transpose.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..n).map(|r| a.get(r, c)).collect()).collect();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let proj: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
                let qi = cols[i].clone();
                for (v, q) in cols[j].iter_mut().zip(&qi) {
                    *v -= proj * q;
                }
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Degenerate("qr_orthogonal: rank-deficient input".into()));
        }
        for v in &mut cols[j] {
            *v /= norm;
        }
    }
    let mut data = vec![0.0; n * n];
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            data[r * n + c] = *v;
        }
    }
    Matrix::new(n, n, data)
}

/// Random `n x n` orthogonal matrix from the QR of a Gaussian matrix.
pub fn random_orthogonal(stream: &mut RngStream, n: usize) -> Result<Matrix> {
    qr_orthogonal(&gaussian_sample(stream, n, n, 0.0, 1.0)?)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
/// Intended for small instances in checks.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("symmetric_eigenvalues", "matrix must be square"));
    }
    let mut m: Vec<f64> = a.as_slice().to_vec();
    let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}
