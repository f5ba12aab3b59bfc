//! Small dense helpers for symmetric positive definite systems.

use crate::error::{Error, Result};
use crate::substrate::tensor::Tensor;

/// Cholesky factorization a = L L^T of a symmetric positive definite matrix.
pub struct Cholesky {
    l: Vec<f64>,
    n: usize,
}

impl Cholesky {
    pub fn new(a: &Tensor<f64>) -> Result<Self> {
        if a.rank() != 2 || a.shape[0] != a.shape[1] {
            return Err(Error::shape(format!("cholesky: square matrix required, got {:?}", a.shape)));
        }
        let n = a.shape[0];
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a.at2(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::numeric(format!(
                            "cholesky: matrix not positive definite (pivot {i} = {s})"
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { l, n })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }

    /// Solve A X = B column by column; B is [n, m].
    pub fn solve_mat(&self, b: &Tensor<f64>) -> Tensor<f64> {
        let n = self.n;
        let m = b.shape[1];
        let mut out = Tensor::zeros(vec![n, m]);
        for j in 0..m {
            let col: Vec<f64> = (0..n).map(|i| b.at2(i, j)).collect();
            let x = self.solve_vec(&col);
            for i in 0..n {
                out.data[i * m + j] = x[i];
            }
        }
        out
    }

    pub fn inverse(&self) -> Tensor<f64> {
        let n = self.n;
        let eye = {
            let mut t = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                t.data[i * n + i] = 1.0;
            }
            t
        };
        self.solve_mat(&eye)
    }

    pub fn logdet(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.l[i * self.n + i].ln()).sum()
    }
}
