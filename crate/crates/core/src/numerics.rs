//! Dense row-major matrices and the linear-algebra kernels used by the
//! pipeline: Jacobi symmetric eigendecomposition, Cholesky SPD solves and
//! pairwise squared Euclidean distances.
//!
//! Everything here is a pure function of its inputs and accumulates in `f64`.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Symmetry tolerance accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-9;

const JACOBI_OFF_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{row},{col}] - a[{col},{row}]| = {gap:e}")]
    NonSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting wrong lengths and NaN/Inf entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Builds a matrix from `f32` storage, widening to `f64`.
    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| f64::from(v)).collect())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * self` without materializing the transpose.
    pub fn gram(&self) -> Matrix {
        let mut g = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..self.cols {
                    g.data[i * self.cols + j] += a * row[j];
                }
            }
        }
        for i in 0..self.cols {
            for j in 0..i {
                g.data[i * self.cols + j] = g.data[j * self.cols + i];
            }
        }
        g
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Largest absolute entrywise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
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

/// Eigenvalues sorted descending, eigenvectors stored as matching columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

/// Full spectral decomposition of a symmetric matrix by cyclic Jacobi sweeps.
///
/// Each eigenvector is sign-normalized so that its largest-magnitude
/// component is positive, which makes the output deterministic.
pub fn sym_eig(a: &Matrix) -> Result<EigResult> {
    let n = a.rows;
    if a.rows != a.cols {
        return Err(NumericsError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            if !v.is_finite() {
                return Err(NumericsError::NonFinite { row: i, col: j });
            }
            if j > i {
                let gap = (v - a[(j, i)]).abs();
                if gap > SYMMETRY_TOL {
                    return Err(NumericsError::NonSymmetric {
                        row: i,
                        col: j,
                        gap,
                    });
                }
            }
        }
    }

    // Work on the symmetrized copy.
    let mut m = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off < JACOBI_OFF_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in original diagonal order.
    order.sort_by(|&x, &y| m[(y, y)].total_cmp(&m[(x, x)]));

    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut pivot = 0.0f64;
        for k in 0..n {
            let x = v[(k, src)];
            if x.abs() > pivot.abs() + 1e-12 {
                pivot = x;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, col)] = sign * v[(k, src)];
        }
    }
    Ok(EigResult {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Lower-triangular Cholesky factor `L` with `a = L L^T`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.rows != a.cols {
        return Err(NumericsError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(NumericsError::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `a X = b` for symmetric positive definite `a` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows != a.rows {
        return Err(NumericsError::DimensionMismatch(format!(
            "system is {}x{} but right-hand side has {} rows",
            a.rows, a.cols, b.rows
        )));
    }
    let l = cholesky(a)?;
    let n = a.rows;
    let mut x = b.clone();
    for col in 0..b.cols {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, col)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[(i, col)];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// `D[i][j] = ||a_i - b_j||^2` over the rows of `a` and `b`.
pub fn pairwise_sq_dist(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(NumericsError::DimensionMismatch(format!(
            "points of dimension {} vs {}",
            a.cols, b.cols
        )));
    }
    let mut d = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            d[(i, j)] = sq_dist(ai, b.row(j));
        }
    }
    Ok(d)
}

/// Squared Euclidean distance between two equally long slices.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
