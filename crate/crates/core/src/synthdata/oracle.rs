//! Separability oracle: a closed-form ridge least-squares classifier over
//! per-utterance frame means. It has to score well before any encoder
//! training is worth attempting, and it doubles as the speaker classifier
//! used when judging resynthesized output.

use crate::error::Result;
use crate::substrate::linalg::Cholesky;
use crate::substrate::tensor::Tensor;
use crate::synthdata::gen::FeatureSequence;

/// One-vs-all linear regression onto one-hot labels, solved in closed form
/// with a small ridge term. Weights are [dim + 1, n_classes] with the bias
/// in the last input row.
pub struct LinearOracle {
    pub weights: Tensor<f64>,
    pub n_classes: usize,
}

pub fn frame_mean(seq: &FeatureSequence) -> Vec<f64> {
    let (t, f) = (seq.num_frames(), seq.dim());
    let mut m = vec![0.0; f];
    for ti in 0..t {
        for fi in 0..f {
            m[fi] += seq.frames.data[ti * f + fi] as f64;
        }
    }
    for v in m.iter_mut() {
        *v /= t as f64;
    }
    m
}

impl LinearOracle {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<LinearOracle> {
        assert_eq!(features.len(), labels.len());
        let n = features.len();
        let d = features[0].len() + 1;
        let mut x = Tensor::zeros(vec![n, d]);
        for (i, feat) in features.iter().enumerate() {
            x.data[i * d..i * d + d - 1].copy_from_slice(feat);
            x.data[i * d + d - 1] = 1.0;
        }
        // gram = X^T X + ridge I
        let xt = x.transpose2();
        let mut gram = xt.matmul(&x)?;
        let ridge = 1e-3;
        for i in 0..d {
            gram.data[i * d + i] += ridge;
        }
        let mut y = Tensor::zeros(vec![n, n_classes]);
        for (i, &lab) in labels.iter().enumerate() {
            y.data[i * n_classes + lab] = 1.0;
        }
        let rhs = xt.matmul(&y)?;
        let weights = Cholesky::new(&gram)?.solve_mat(&rhs);
        Ok(LinearOracle { weights, n_classes })
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let d = self.weights.shape[0];
        assert_eq!(feature.len() + 1, d);
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..self.n_classes {
            let mut s = self.weights.at2(d - 1, c);
            for (i, &v) in feature.iter().enumerate() {
                s += self.weights.at2(i, c) * v;
            }
            if s > best.1 {
                best = (c, s);
            }
        }
        best.0
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &l)| self.predict(f) == l)
            .count();
        hits as f64 / labels.len() as f64
    }
}
