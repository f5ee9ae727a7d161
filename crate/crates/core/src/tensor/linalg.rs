use super::Tensor;
use crate::error::{Result, TggError};

/// Relative pivot floor: factorization refuses pivots below this times `max|M|`.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// LU factorization with partial pivoting, `P M = L U`.
///
/// `L` (unit diagonal) and `U` are packed into one row-major buffer.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    packed: Vec<f64>,
    /// `perm[i]` is the row of `M` that ended up in row `i`.
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(m: &Tensor) -> Result<Lu> {
        let n = m.rows();
        if m.shape().len() != 2 || m.cols() != n {
            return Err(TggError::Dimension {
                op: "lu",
                left: m.shape().to_vec(),
                right: vec![n, n],
            });
        }
        let scale = m.max_abs();
        let threshold = PIVOT_TOLERANCE * scale.max(f64::MIN_POSITIVE);
        let mut a = m.values().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) =
                (k..n)
                    .map(|i| (i, a[i * n + k].abs()))
                    .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot < threshold || pivot == 0.0 {
                return Err(TggError::Conditioning { pivot, threshold });
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let akk = a[k * n + k];
            for i in (k + 1)..n {
                let f = a[i * n + k] / akk;
                a[i * n + k] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Ok(Lu { n, packed: a, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `M X = B` column by column.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        self.check_rhs(b)?;
        let n = self.n;
        let c = b.cols();
        let mut x = vec![0.0; n * c];
        let mut col = vec![0.0; n];
        for j in 0..c {
            for i in 0..n {
                col[i] = b.get(self.perm[i], j);
            }
            // L y = P b
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= self.packed[i * n + k] * col[k];
                }
                col[i] = s;
            }
            // U x = y
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in (i + 1)..n {
                    s -= self.packed[i * n + k] * col[k];
                }
                col[i] = s / self.packed[i * n + i];
            }
            for i in 0..n {
                x[i * c + j] = col[i];
            }
        }
        Ok(Tensor::matrix(n, c, x))
    }

    /// Solves `Mᵀ X = B` reusing the same factors.
    pub fn solve_transpose(&self, b: &Tensor) -> Result<Tensor> {
        self.check_rhs(b)?;
        let n = self.n;
        let c = b.cols();
        let mut x = vec![0.0; n * c];
        let mut col = vec![0.0; n];
        for j in 0..c {
            for i in 0..n {
                col[i] = b.get(i, j);
            }
            // Uᵀ z = b
            for i in 0..n {
                let mut s = col[i];
                for k in 0..i {
                    s -= self.packed[k * n + i] * col[k];
                }
                col[i] = s / self.packed[i * n + i];
            }
            // Lᵀ w = z
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in (i + 1)..n {
                    s -= self.packed[k * n + i] * col[k];
                }
                col[i] = s;
            }
            // x = Pᵀ w
            for i in 0..n {
                x[self.perm[i] * c + j] = col[i];
            }
        }
        Ok(Tensor::matrix(n, c, x))
    }

    fn check_rhs(&self, b: &Tensor) -> Result<()> {
        if b.rows() != self.n {
            return Err(TggError::Dimension {
                op: "solve",
                left: vec![self.n, self.n],
                right: b.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// `M⁻¹ B` via LU; never forms the inverse.
pub fn solve(m: &Tensor, b: &Tensor) -> Result<Tensor> {
    Lu::factor(m)?.solve(b)
}
