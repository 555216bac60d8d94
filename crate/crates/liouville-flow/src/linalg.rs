//! Small dense linear algebra.
//!
//! Everything in this crate works with matrices of side at most a few dozen
//! (state dimension d ≤ 8, layer widths ≤ 64), so a row-major `Vec<f64>`
//! matrix with straightforward O(n³) kernels is both fast enough and easy to
//! audit. The one numerically load-bearing routine is the LU factorization
//! with partial pivoting, which produces the signed log-determinant used for
//! the per-step change-of-variables bookkeeping.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of side `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Build from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Precondition("ragged rows in matrix literal".into()));
        }
        Ok(Mat { rows: r, cols: c, data: rows.concat() })
    }

    /// Build from a flat row-major slice.
    pub fn from_flat(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Precondition(format!(
                "flat data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data: data.to_vec() })
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Mat::zeros(u.len(), v.len());
        for (i, ui) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                m[(i, j)] = ui * vj;
            }
        }
        m
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Flat row-major view of the entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat row-major view of the entries.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `A x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    /// `Aᵀ x` without materializing the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let xi = x[i];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        out
    }

    /// Matrix product `A B`.
    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        out
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Entrywise `self + s * other`.
    pub fn add_scaled(&self, other: &Mat, s: f64) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (o, v) in out.data.iter_mut().zip(&other.data) {
            *o += s * v;
        }
        out
    }

    /// Entrywise scaling in place.
    pub fn scale_mut(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Sum of diagonal entries.
    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "trace of non-square matrix");
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    /// Frobenius inner product `⟨A, B⟩ = Σ a_ij b_ij`.
    pub fn frob_inner(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// True when all entries are finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Spectral norm `‖A‖₂` by power iteration on `AᵀA`.
    ///
    /// The starting vector is deterministic, so repeated calls agree bitwise.
    pub fn spectral_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        // Deterministic, generic start: a slightly tilted all-ones vector so
        // eigenvectors orthogonal to 1 are still picked up.
        let mut v: Vec<f64> = (0..self.cols).map(|j| 1.0 + 0.01 * (j as f64 + 1.0)).collect();
        let mut norm = normalize(&mut v);
        if norm == 0.0 {
            return 0.0;
        }
        let mut sigma2 = 0.0;
        for _ in 0..200 {
            let av = self.matvec(&v);
            let mut atav = self.tr_matvec(&av);
            norm = normalize(&mut atav);
            if norm == 0.0 {
                return 0.0;
            }
            let prev = sigma2;
            sigma2 = norm;
            v = atav;
            if (sigma2 - prev).abs() <= 1e-14 * sigma2.max(1.0) {
                break;
            }
        }
        sigma2.sqrt()
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// LU factorization with partial pivoting.
///
/// Factors `PA = LU`; exposes the signed log-determinant and linear solves.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Mat,
    piv: Vec<usize>,
    pivot_sign: f64,
}

impl Lu {
    /// Factor a square matrix. Singular input is not an error here; it shows
    /// up as a zero pivot, `log_abs_det() == -inf`, and `solve` reporting
    /// failure.
    pub fn factor(a: &Mat) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Precondition("LU of a non-square matrix".into()));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut pivot_sign = 1.0;
        for k in 0..n {
            // Pivot search in column k.
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in (k + 1)..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
                piv.swap(k, p);
                pivot_sign = -pivot_sign;
            }
            let pivot = lu[(k, k)];
            if pivot == 0.0 {
                continue; // singular; leave the zero pivot in place
            }
            for i in (k + 1)..n {
                let factor = lu[(i, k)] / pivot;
                lu[(i, k)] = factor;
                for j in (k + 1)..n {
                    let sub = factor * lu[(k, j)];
                    lu[(i, j)] -= sub;
                }
            }
        }
        Ok(Lu { n, lu, piv, pivot_sign })
    }

    /// `log |det A|`; `-inf` for a singular matrix.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[(i, i)].abs().ln()).sum()
    }

    /// Sign of `det A` (0 for singular).
    pub fn det_sign(&self) -> f64 {
        let mut s = self.pivot_sign;
        for i in 0..self.n {
            let d = self.lu[(i, i)];
            if d == 0.0 {
                return 0.0;
            }
            if d < 0.0 {
                s = -s;
            }
        }
        s
    }

    /// Solve `A x = b`. Returns `None` when the factorization is singular.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        assert_eq!(b.len(), self.n, "solve dimension mismatch");
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        // Forward substitution with unit lower triangle.
        for i in 1..self.n {
            for j in 0..i {
                x[i] -= self.lu[(i, j)] * x[j];
            }
        }
        // Back substitution.
        for i in (0..self.n).rev() {
            for j in (i + 1)..self.n {
                x[i] -= self.lu[(i, j)] * x[j];
            }
            let d = self.lu[(i, i)];
            if d == 0.0 {
                return None;
            }
            x[i] /= d;
        }
        Some(x)
    }

    /// Inverse matrix, column by column. `None` when singular.
    pub fn inverse(&self) -> Option<Mat> {
        let mut inv = Mat::zeros(self.n, self.n);
        let mut e = vec![0.0; self.n];
        for j in 0..self.n {
            e[j] = 1.0;
            let col = self.solve(&e)?;
            e[j] = 0.0;
            for i in 0..self.n {
                inv[(i, j)] = col[i];
            }
        }
        Some(inv)
    }
}
