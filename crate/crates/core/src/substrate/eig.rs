//! Cyclic Jacobi eigensolver for symmetric matrices.

use crate::error::{Error, Result};
use crate::substrate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix: `a = V diag(lambda) V^T`.
///
/// Returns eigenvalues sorted descending and the matching orthonormal
/// eigenvectors as columns of `v`. Cyclic Jacobi rotations; convergence when
/// the off-diagonal Frobenius mass falls below `1e-12 * ||a||`.
pub fn sym_eig(a: &Tensor<f64>) -> Result<(Vec<f64>, Tensor<f64>)> {
    if a.rank() != 2 || a.shape[0] != a.shape[1] {
        return Err(Error::contract(format!("sym_eig: matrix must be square, got {:?}", a.shape)));
    }
    let n = a.shape[0];
    let norm = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.at2(i, j) - a.at2(j, i)).abs() > 1e-10 * norm.max(1.0) {
                return Err(Error::contract(format!(
                    "sym_eig: asymmetric input at ({i},{j}): {} vs {}",
                    a.at2(i, j),
                    a.at2(j, i)
                )));
            }
        }
    }

    let mut m = a.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let tol = 1e-12 * norm;

    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| 2.0 * m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64 * n as f64).max(1.0) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // stable tangent of the rotation angle
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigs: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| eigs[j].partial_cmp(&eigs[i]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| eigs[i]).collect();
    let mut vs = Tensor::zeros(vec![n, n]);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vs.data[k * n + col] = v[k * n + src];
        }
    }
    Ok((sorted, vs))
}
