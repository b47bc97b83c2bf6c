//! Dense linear algebra for the full-covariance Dirichlet standardization:
//! a small row-major matrix, cyclic-Jacobi eigendecomposition for symmetric
//! matrices, the symmetric square root, and the Lyapunov solve carried out
//! in the eigenbasis. Dimensions here are latent-component counts, so
//! everything stays O(K³) with tiny K.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "dimension mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    fn off_diagonal_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j {
                    s += self[(i, j)] * self[(i, j)];
                }
            }
        }
        s.sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix: eigenvalues plus the orthonormal
/// matrix whose columns are the eigenvectors.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

/// Cyclic Jacobi rotations until the off-diagonal norm vanishes.
pub fn sym_eigen(a: &Mat) -> Result<SymEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Domain("sym_eigen requires a square matrix".into()));
    }
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let max_sweeps = 64;
    let mut converged = false;
    for _ in 0..max_sweeps {
        if m.off_diagonal_norm() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
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
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && m.off_diagonal_norm() > 1e-12 * scale {
        return Err(Error::Numerical(
            "Jacobi eigendecomposition did not converge".into(),
        ));
    }
    let values = (0..n).map(|i| m[(i, i)]).collect();
    Ok(SymEigen { values, vectors: v })
}

impl SymEigen {
    /// Rebuild V f(D) Vᵀ for a scalar function of the eigenvalues.
    pub fn apply_spectral(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.values.len();
        let v = &self.vectors;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for (k, &d) in self.values.iter().enumerate() {
                    s += v[(i, k)] * f(d) * v[(j, k)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }
}

/// Solve X S + S X = B for symmetric B, where S = V diag(s) Vᵀ with
/// nonnegative spectrum `s`. In the eigenbasis the solution is elementwise:
/// X̃_ij = B̃_ij / (s_i + s_j).
pub fn lyapunov_spd_solve(s: &[f64], v: &Mat, b: &Mat) -> Result<Mat> {
    let n = s.len();
    let bt = v.transpose().matmul(b).matmul(v);
    let mut xt = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let denom = s[i] + s[j];
            if denom < 1e-12 {
                return Err(Error::Numerical(format!(
                    "Lyapunov solve: eigenvalue pair sum {denom} below 1e-12"
                )));
            }
            xt[(i, j)] = bt[(i, j)] / denom;
        }
    }
    Ok(v.matmul(&xt).matmul(&v.transpose()))
}
