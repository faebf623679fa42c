use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
///
/// Factor once, then solve against as many right-hand sides as needed.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    // row-major lower triangle, upper part unused
    l: Vec<f64>,
}

impl Cholesky {
    /// Factor a symmetric positive definite matrix. Only the lower triangle
    /// of `a` is read.
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::shape(
                "cholesky",
                format!("expected square matrix, got {}x{}", a.rows(), a.cols()),
            ));
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A·X = B` column by column with forward and back substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::shape(
                "cholesky solve",
                format!("factor is {n}x{n}, right-hand side has {} rows", b.rows()),
            ));
        }
        let mut x = b.clone();
        let cols = b.cols();
        let data = x.as_mut_slice();
        // L·Y = B
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[i * n + k];
                if lik == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    data[i * cols + c] -= lik * data[k * cols + c];
                }
            }
            let lii = self.l[i * n + i];
            for c in 0..cols {
                data[i * cols + c] /= lii;
            }
        }
        // Lᵀ·X = Y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = self.l[k * n + i];
                if lki == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    data[i * cols + c] -= lki * data[k * cols + c];
                }
            }
            let lii = self.l[i * n + i];
            for c in 0..cols {
                data[i * cols + c] /= lii;
            }
        }
        Ok(x)
    }

    /// Solve `X·A = B` for `X` (row-oriented right-hand sides), using symmetry of `A`.
    pub fn solve_right(&self, b: &Matrix) -> Result<Matrix> {
        if b.cols() != self.n {
            return Err(Error::shape(
                "cholesky solve_right",
                format!("factor is {0}x{0}, right-hand side has {1} columns", self.n, b.cols()),
            ));
        }
        Ok(self.solve(&b.transpose())?.transpose())
    }
}

/// Solve `a·X = b` for symmetric positive definite `a` via Cholesky.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "spd_solve",
            format!("{}x{} system with {} right-hand rows", a.rows(), a.cols(), b.rows()),
        ));
    }
    Cholesky::factor(a)?.solve(b)
}
