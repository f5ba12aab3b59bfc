//! Embedding post-processing and trial scoring: centering, LDA, the
//! two-covariance PLDA model (speaker mean y ~ N(mu, B), observation
//! x ~ N(y, W)) with closed-form log-likelihood-ratio scoring, s-norm, and
//! cosine similarity. No length normalization anywhere in the pipeline.

use std::path::Path;

use crate::error::{Error, Result};
use crate::substrate::eig::sym_eig;
use crate::substrate::linalg::Cholesky;
use crate::substrate::tensor::Tensor;

// ---------------------------------------------------------------- centering

#[derive(Clone, Debug)]
pub struct CenteringStats {
    pub mean: Vec<f64>,
}

pub fn center_fit(embeddings: &Tensor<f64>) -> Result<CenteringStats> {
    let (n, d) = (embeddings.nrows(), embeddings.ncols());
    if n == 0 {
        return Err(Error::argument("center_fit: need at least one embedding"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += embeddings.at2(i, j);
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    Ok(CenteringStats { mean })
}

pub fn center_apply(stats: &CenteringStats, embedding: &[f64]) -> Result<Vec<f64>> {
    if embedding.len() != stats.mean.len() {
        return Err(Error::shape(format!(
            "center_apply: embedding dim {} != mean dim {}",
            embedding.len(),
            stats.mean.len()
        )));
    }
    Ok(embedding.iter().zip(&stats.mean).map(|(x, m)| x - m).collect())
}

// --------------------------------------------------------------------- LDA

#[derive(Clone, Debug)]
pub struct LdaTransform {
    /// [out_dim, in_dim]; rows ordered by descending generalized eigenvalue.
    pub matrix: Tensor<f64>,
}

impl LdaTransform {
    pub fn apply(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let (o, i) = (self.matrix.nrows(), self.matrix.ncols());
        if embedding.len() != i {
            return Err(Error::shape(format!(
                "lda_apply: embedding dim {} != transform input dim {i}",
                embedding.len()
            )));
        }
        let mut out = vec![0.0; o];
        for r in 0..o {
            for c in 0..i {
                out[r] += self.matrix.at2(r, c) * embedding[c];
            }
        }
        Ok(out)
    }
}

struct Scatter {
    within: Tensor<f64>,
    between: Tensor<f64>,
    class_sizes: Vec<usize>,
}

fn scatter(embeddings: &Tensor<f64>, labels: &[usize]) -> Result<Scatter> {
    let (n, d) = (embeddings.nrows(), embeddings.ncols());
    if n != labels.len() {
        return Err(Error::shape(format!("scatter: {n} embeddings vs {} labels", labels.len())));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; n_classes];
    let mut means = vec![vec![0.0; d]; n_classes];
    let mut global = vec![0.0; d];
    for (i, &lab) in labels.iter().enumerate() {
        counts[lab] += 1;
        for j in 0..d {
            means[lab][j] += embeddings.at2(i, j);
            global[j] += embeddings.at2(i, j);
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::argument("scatter: labels must be contiguous 0..n_classes"));
    }
    for (c, m) in counts.iter().zip(means.iter_mut()) {
        for v in m.iter_mut() {
            *v /= *c as f64;
        }
    }
    for v in global.iter_mut() {
        *v /= n as f64;
    }
    let mut within = Tensor::zeros(vec![d, d]);
    let mut between = Tensor::zeros(vec![d, d]);
    for (i, &lab) in labels.iter().enumerate() {
        for a in 0..d {
            let da = embeddings.at2(i, a) - means[lab][a];
            for b in 0..d {
                within.data[a * d + b] += da * (embeddings.at2(i, b) - means[lab][b]) / n as f64;
            }
        }
    }
    for (c, m) in counts.iter().zip(&means) {
        let w = *c as f64 / n as f64;
        for a in 0..d {
            for b in 0..d {
                between.data[a * d + b] += w * (m[a] - global[a]) * (m[b] - global[b]);
            }
        }
    }
    Ok(Scatter { within, between, class_sizes: counts })
}

/// Rows solve S_b v = lambda (S_w + eps I) v via whitening of S_w followed
/// by a symmetric eigendecomposition; eps = 1e-6 * trace(S_w) / dim.
pub fn lda_fit(embeddings: &Tensor<f64>, labels: &[usize], out_dim: usize) -> Result<LdaTransform> {
    let d = embeddings.ncols();
    let sc = scatter(embeddings, labels)?;
    let n_classes = sc.class_sizes.len();
    if n_classes < 2 || sc.class_sizes.iter().any(|&c| c < 2) {
        return Err(Error::argument("lda_fit: need >= 2 speakers with >= 2 embeddings each"));
    }
    let max_dim = d.min(n_classes - 1);
    if out_dim == 0 || out_dim > max_dim {
        return Err(Error::argument(format!(
            "lda_fit: out_dim {out_dim} outside [1, min(dim, speakers - 1) = {max_dim}]"
        )));
    }
    let trace: f64 = (0..d).map(|i| sc.within.at2(i, i)).sum();
    let eps = 1e-6 * trace / d as f64;
    let mut sw = sc.within.clone();
    for i in 0..d {
        sw.data[i * d + i] += eps;
    }
    let (evals, evecs) = sym_eig(&sw)?;
    // whitening transform phi = U diag(lambda^-1/2)
    let mut phi = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        for j in 0..d {
            phi.data[i * d + j] = evecs.at2(i, j) / evals[j].max(eps).sqrt();
        }
    }
    let m = phi.transpose2().matmul(&sc.between)?.matmul(&phi)?;
    // symmetrize against roundoff before the eigensolve
    let mut ms = m.clone();
    for i in 0..d {
        for j in 0..d {
            ms.data[i * d + j] = 0.5 * (m.at2(i, j) + m.at2(j, i));
        }
    }
    let (_, v) = sym_eig(&ms)?;
    let mut matrix = Tensor::zeros(vec![out_dim, d]);
    for r in 0..out_dim {
        for c in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += phi.at2(c, k) * v.at2(k, r);
            }
            matrix.data[r * d + c] = s;
        }
    }
    Ok(LdaTransform { matrix })
}

// -------------------------------------------------------------------- PLDA

#[derive(Clone, Debug)]
pub struct PldaModel {
    pub mu: Vec<f64>,
    pub between_cov: Tensor<f64>,
    pub within_cov: Tensor<f64>,
}

fn group_by_speaker(labels: &[usize]) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut groups = vec![Vec::new(); n_classes];
    for (i, &lab) in labels.iter().enumerate() {
        groups[lab].push(i);
    }
    groups
}

fn mat_add_scaled(a: &Tensor<f64>, b: &Tensor<f64>, s: f64) -> Tensor<f64> {
    let mut out = a.clone();
    for (o, &v) in out.data.iter_mut().zip(&b.data) {
        *o += s * v;
    }
    out
}

/// EM for the two-covariance model. Returns the model and the per-iteration
/// total log-likelihood trace, which must be non-decreasing (1e-8 slack).
pub fn plda_fit(
    embeddings: &Tensor<f64>,
    labels: &[usize],
    iters: usize,
) -> Result<(PldaModel, Vec<f64>)> {
    let (n, d) = (embeddings.nrows(), embeddings.ncols());
    if n != labels.len() {
        return Err(Error::shape(format!("plda_fit: {n} embeddings vs {} labels", labels.len())));
    }
    let groups = group_by_speaker(labels);
    if groups.len() < 2 {
        return Err(Error::argument("plda_fit: need >= 2 speakers"));
    }
    let sc = scatter(embeddings, labels)?;
    let mut mu = center_fit(embeddings)?.mean;
    let mut b = sc.between.clone();
    let mut w = sc.within.clone();
    // floor both covariances away from singularity
    let ridge = 1e-6 * (0..d).map(|i| sc.within.at2(i, i) + sc.between.at2(i, i)).sum::<f64>() / d as f64 + 1e-12;
    for i in 0..d {
        w.data[i * d + i] += ridge;
        b.data[i * d + i] += ridge;
    }

    let mut ll_trace: Vec<f64> = Vec::with_capacity(iters);
    for iter in 0..iters {
        let chol_w = Cholesky::new(&w).map_err(|e| {
            Error::numeric(format!("plda_fit: within covariance not PD at iteration {iter}: {e}"))
        })?;
        let logdet_w = chol_w.logdet();
        let w_inv = chol_w.inverse();

        let mut ll = 0.0;
        let mut mu_new = vec![0.0; d];
        let mut b_new = Tensor::zeros(vec![d, d]);
        let mut w_new = Tensor::zeros(vec![d, d]);
        let mut posteriors = Vec::with_capacity(groups.len());

        for idx in &groups {
            let ni = idx.len() as f64;
            // mean of this speaker's observations and centered sum
            let mut xbar = vec![0.0; d];
            for &i in idx {
                for j in 0..d {
                    xbar[j] += embeddings.at2(i, j) / ni;
                }
            }
            let wnb = mat_add_scaled(&w, &b, ni);
            let chol_wnb = Cholesky::new(&wnb).map_err(|e| {
                Error::numeric(format!("plda_fit: W + nB not PD at iteration {iter}: {e}"))
            })?;

            // log-likelihood of the speaker's block via the exchangeable
            // Gaussian identities:
            //   logdet(Cov) = (n-1) logdet W + logdet(W + nB)
            //   quad = sum_j d_j' W^-1 d_j - t' K t,  t = W^-1 s,
            //   K = (W - W (W+nB)^-1 W) / n
            let mut quad = 0.0;
            let mut s = vec![0.0; d];
            for &i in idx {
                let dj: Vec<f64> = (0..d).map(|j| embeddings.at2(i, j) - mu[j]).collect();
                let wd = chol_w.solve_vec(&dj);
                quad += dj.iter().zip(&wd).map(|(a, b)| a * b).sum::<f64>();
                for j in 0..d {
                    s[j] += dj[j];
                }
            }
            let t = chol_w.solve_vec(&s);
            let wt: Vec<f64> = (0..d)
                .map(|r| (0..d).map(|c| w.at2(r, c) * t[c]).sum::<f64>())
                .collect();
            let inv_wt = chol_wnb.solve_vec(&wt);
            let k_t: Vec<f64> = (0..d)
                .map(|r| {
                    let wmwiw: f64 = (0..d).map(|c| w.at2(r, c) * inv_wt[c]).sum();
                    (wt[r] - wmwiw) / ni
                })
                .collect();
            quad -= t.iter().zip(&k_t).map(|(a, b)| a * b).sum::<f64>();
            ll += -0.5
                * (ni * d as f64 * (2.0 * std::f64::consts::PI).ln()
                    + (ni - 1.0) * logdet_w
                    + chol_wnb.logdet()
                    + quad);

            // posterior of the speaker mean:
            //   yhat = mu + nB (W + nB)^-1 (xbar - mu)
            //   cov  = (W - W (W+nB)^-1 W) / n
            let diff: Vec<f64> = (0..d).map(|j| xbar[j] - mu[j]).collect();
            let inv_diff = chol_wnb.solve_vec(&diff);
            let yhat: Vec<f64> = (0..d)
                .map(|r| {
                    let bd: f64 = (0..d).map(|c| b.at2(r, c) * inv_diff[c]).sum();
                    mu[r] + ni * bd
                })
                .collect();
            let w_inv_wnb = chol_wnb.solve_mat(&w);
            let mut post_cov = Tensor::zeros(vec![d, d]);
            for r in 0..d {
                for c in 0..d {
                    let wmwiw: f64 = (0..d).map(|k| w.at2(r, k) * w_inv_wnb.at2(k, c)).sum();
                    post_cov.data[r * d + c] = (w.at2(r, c) - wmwiw) / ni;
                }
            }
            for j in 0..d {
                mu_new[j] += yhat[j] / groups.len() as f64;
            }
            posteriors.push((yhat, post_cov, idx));
        }

        // M-step
        for (yhat, post_cov, idx) in &posteriors {
            let sg = groups.len() as f64;
            for r in 0..d {
                for c in 0..d {
                    b_new.data[r * d + c] += (post_cov.at2(r, c)
                        + (yhat[r] - mu_new[r]) * (yhat[c] - mu_new[c]))
                        / sg;
                    w_new.data[r * d + c] += idx.len() as f64 * post_cov.at2(r, c) / n as f64;
                }
            }
            for &i in idx.iter().copied().collect::<Vec<_>>().iter() {
                for r in 0..d {
                    let er = embeddings.at2(i, r) - yhat[r];
                    for c in 0..d {
                        w_new.data[r * d + c] +=
                            er * (embeddings.at2(i, c) - yhat[c]) / n as f64;
                    }
                }
            }
        }
        let _ = w_inv;

        if let Some(&prev) = ll_trace.last() {
            if ll < prev - 1e-8 * (1.0 + prev.abs()) {
                return Err(Error::numeric(format!(
                    "plda_fit: log-likelihood decreased at iteration {iter}: {prev} -> {ll}"
                )));
            }
        }
        ll_trace.push(ll);
        mu = mu_new;
        b = b_new;
        w = w_new;
        for i in 0..d {
            w.data[i * d + i] += 1e-12;
        }
    }
    Ok((PldaModel { mu, between_cov: b, within_cov: w }, ll_trace))
}

fn log_gauss(x: &[f64], mu: &[f64], chol: &Cholesky, logdet: f64) -> f64 {
    let z: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
    let sz = chol.solve_vec(&z);
    let quad: f64 = z.iter().zip(&sz).map(|(a, b)| a * b).sum();
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Precomputed factorizations for repeated closed-form LLR scoring:
/// log N([e;t]; [mu;mu], [[B+W, B], [B, B+W]]) minus the two independent
/// marginals N(.; mu, B+W).
pub struct PldaScorer {
    mu: Vec<f64>,
    mu2: Vec<f64>,
    chol_bw: Cholesky,
    chol_joint: Cholesky,
    logdet_bw: f64,
    logdet_joint: f64,
}

impl PldaScorer {
    pub fn new(model: &PldaModel) -> Result<PldaScorer> {
        let d = model.mu.len();
        let bw = mat_add_scaled(&model.within_cov, &model.between_cov, 1.0);
        let chol_bw = Cholesky::new(&bw)?;
        let mut joint = Tensor::zeros(vec![2 * d, 2 * d]);
        for r in 0..d {
            for c in 0..d {
                joint.data[r * 2 * d + c] = bw.at2(r, c);
                joint.data[(r + d) * 2 * d + c + d] = bw.at2(r, c);
                joint.data[r * 2 * d + c + d] = model.between_cov.at2(r, c);
                joint.data[(r + d) * 2 * d + c] = model.between_cov.at2(r, c);
            }
        }
        let chol_joint = Cholesky::new(&joint)?;
        let mut mu2 = model.mu.clone();
        mu2.extend_from_slice(&model.mu);
        Ok(PldaScorer {
            mu: model.mu.clone(),
            mu2,
            logdet_bw: chol_bw.logdet(),
            logdet_joint: chol_joint.logdet(),
            chol_bw,
            chol_joint,
        })
    }

    pub fn score(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let d = self.mu.len();
        if enroll.len() != d || test.len() != d {
            return Err(Error::shape(format!(
                "plda_score: dims {} / {} vs model {d}",
                enroll.len(),
                test.len()
            )));
        }
        let mut xt = Vec::with_capacity(2 * d);
        xt.extend_from_slice(enroll);
        xt.extend_from_slice(test);
        let ll_same = log_gauss(&xt, &self.mu2, &self.chol_joint, self.logdet_joint);
        let ll_diff = log_gauss(enroll, &self.mu, &self.chol_bw, self.logdet_bw)
            + log_gauss(test, &self.mu, &self.chol_bw, self.logdet_bw);
        Ok(ll_same - ll_diff)
    }
}

pub fn plda_score(model: &PldaModel, enroll: &[f64], test: &[f64]) -> Result<f64> {
    PldaScorer::new(model)?.score(enroll, test)
}

// ---------------------------------------------------------- normalization

/// s-norm: s' = ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t) / 2, with
/// population means and stds of the cohort scores.
pub fn snorm(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64]) -> Result<f64> {
    let stats = |scores: &[f64]| -> Result<(f64, f64)> {
        if scores.is_empty() {
            return Err(Error::argument("snorm: empty cohort"));
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(Error::numeric("snorm: zero cohort std"));
        }
        Ok((mean, var.sqrt()))
    };
    let (me, se) = stats(enroll_cohort)?;
    let (mt, st) = stats(test_cohort)?;
    Ok(0.5 * ((raw - me) / se + (raw - mt) / st))
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine: dims {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::argument("cosine: zero vector"));
    }
    Ok(dot / (na * nb))
}

// ------------------------------------------------------------- score files

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub enroll_id: String,
    pub test_id: String,
    pub score: f64,
}

pub fn scores_to_text(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} {:.6}\n", r.enroll_id, r.test_id, r.score));
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let bad =
            || Error::format((i + 1) as u64, format!("line {}: expected `enroll test score`", i + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        let score: f64 = parts[2].parse().map_err(|_| bad())?;
        out.push(ScoreRecord {
            enroll_id: parts[0].to_string(),
            test_id: parts[1].to_string(),
            score,
        });
    }
    Ok(out)
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    crate::config::write_atomic(path, scores_to_text(records).as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    parse_scores(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::rng::RngStream;

    fn rows(data: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(data)
    }

    #[test]
    fn centering_hand_case() {
        let stats = center_fit(&rows(&[vec![1.0, 1.0], vec![3.0, 3.0]])).unwrap();
        assert_eq!(stats.mean, vec![2.0, 2.0]);
        assert_eq!(center_apply(&stats, &[2.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn centering_zeroes_column_means() {
        let mut rng = RngStream::new(2);
        let data: Vec<Vec<f64>> = (0..100).map(|_| rng.normals(16)).collect();
        let x = rows(&data);
        let stats = center_fit(&x).unwrap();
        let mut sums = vec![0.0; 16];
        for row in &data {
            let c = center_apply(&stats, row).unwrap();
            for (s, v) in sums.iter_mut().zip(&c) {
                *s += v;
            }
        }
        assert!(sums.iter().all(|s| (s / 100.0).abs() < 1e-9));
    }

    fn two_class_data(rng: &mut RngStream, per_class: usize) -> (Tensor<f64>, Vec<usize>) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            let mx = if c == 0 { -1.0 } else { 1.0 };
            for _ in 0..per_class {
                data.push(vec![mx + 0.1 * rng.normal(), 0.1 * rng.normal()]);
                labels.push(c);
            }
        }
        (rows(&data), labels)
    }

    #[test]
    fn lda_finds_separating_direction() {
        // enough samples that the empirical scatter is close to isotropic;
        // the direction matches the closed-form Fisher solution regardless
        let mut rng = RngStream::new(3);
        let (x, labels) = two_class_data(&mut rng, 20000);
        let t = lda_fit(&x, &labels, 1).unwrap();
        let row = [t.matrix.at2(0, 0), t.matrix.at2(0, 1)];
        let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
        assert!((row[1] / norm).abs() < 0.01, "direction {row:?}");
    }

    #[test]
    fn lda_out_dim_validated() {
        let mut rng = RngStream::new(3);
        let (x, labels) = two_class_data(&mut rng, 10);
        assert!(lda_fit(&x, &labels, 2).is_err());
    }

    #[test]
    fn lda_whitens_within_scatter() {
        let mut rng = RngStream::new(7);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3usize {
            let center: Vec<f64> = rng.normals(8).iter().map(|v| 3.0 * v).collect();
            for _ in 0..200 {
                let noise = rng.normals(8);
                data.push(center.iter().zip(&noise).map(|(m, n)| m + n).collect());
                labels.push(c);
            }
        }
        let x = rows(&data);
        let t = lda_fit(&x, &labels, 2).unwrap();
        let projected: Vec<Vec<f64>> = data.iter().map(|r| t.apply(r).unwrap()).collect();
        let sc = scatter(&rows(&projected), &labels).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!(
                    (sc.within.at2(r, c) - want).abs() < 0.05,
                    "projected S_w[{r}][{c}] = {}",
                    sc.within.at2(r, c)
                );
            }
        }
    }

    fn sample_plda(
        rng: &mut RngStream,
        mu: &[f64],
        b_chol: &[Vec<f64>],
        w_chol: &[Vec<f64>],
        speakers: usize,
        obs: usize,
    ) -> (Tensor<f64>, Vec<usize>) {
        let d = mu.len();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for s in 0..speakers {
            let z = rng.normals(d);
            let y: Vec<f64> = (0..d)
                .map(|r| mu[r] + (0..d).map(|c| b_chol[r][c] * z[c]).sum::<f64>())
                .collect();
            for _ in 0..obs {
                let e = rng.normals(d);
                data.push(
                    (0..d)
                        .map(|r| y[r] + (0..d).map(|c| w_chol[r][c] * e[c]).sum::<f64>())
                        .collect(),
                );
                labels.push(s);
            }
        }
        (rows(&data), labels)
    }

    #[test]
    fn plda_recovers_generating_covariances() {
        let mut rng = RngStream::new(11);
        // B = L_b L_b', W = L_w L_w'
        let b_chol = vec![vec![1.0, 0.0], vec![0.3, 0.9]];
        let w_chol = vec![vec![0.7, 0.0], vec![-0.1, 0.6]];
        let (x, labels) = sample_plda(&mut rng, &[0.5, -0.2], &b_chol, &w_chol, 200, 10);
        let (model, ll) = plda_fit(&x, &labels, 20).unwrap();
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs())));
        let truth = |l: &[Vec<f64>]| {
            let mut m = [[0.0; 2]; 2];
            for r in 0..2 {
                for c in 0..2 {
                    for k in 0..2 {
                        m[r][c] += l[r][k] * l[c][k];
                    }
                }
            }
            m
        };
        let bt = truth(&b_chol);
        let wt = truth(&w_chol);
        let rel = |est: &Tensor<f64>, t: &[[f64; 2]; 2]| {
            let mut num = 0.0;
            let mut den = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    num += (est.at2(r, c) - t[r][c]).powi(2);
                    den += t[r][c].powi(2);
                }
            }
            (num / den).sqrt()
        };
        assert!(rel(&model.between_cov, &bt) < 0.15, "B error {}", rel(&model.between_cov, &bt));
        assert!(rel(&model.within_cov, &wt) < 0.15, "W error {}", rel(&model.within_cov, &wt));
    }

    #[test]
    fn plda_single_observation_per_speaker_still_monotone() {
        let mut rng = RngStream::new(13);
        let data: Vec<Vec<f64>> = (0..40).map(|_| rng.normals(3)).collect();
        let labels: Vec<usize> = (0..40).collect();
        let (_, ll) = plda_fit(&rows(&data), &labels, 15).unwrap();
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-8 * (1.0 + w[0].abs())));
    }

    #[test]
    fn plda_no_speaker_effect_shrinks_between() {
        let mut rng = RngStream::new(17);
        // every "speaker" drawn from the same N(0, I): true B = 0
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for s in 0..100 {
            for _ in 0..10 {
                data.push(rng.normals(2));
                labels.push(s);
            }
        }
        let (model, _) = plda_fit(&rows(&data), &labels, 25).unwrap();
        let fro = |m: &Tensor<f64>| m.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            fro(&model.between_cov) < 0.1 * fro(&model.within_cov),
            "B {} vs W {}",
            fro(&model.between_cov),
            fro(&model.within_cov)
        );
    }

    #[test]
    fn plda_score_zero_when_b_zero() {
        let model = PldaModel {
            mu: vec![0.0, 0.0],
            between_cov: Tensor::zeros(vec![2, 2]),
            within_cov: rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        let s = plda_score(&model, &[0.7, -0.3], &[1.2, 0.4]).unwrap();
        assert!(s.abs() < 1e-10, "llr {s}");
    }

    #[test]
    fn plda_score_matches_quadrature_1d() {
        let model = PldaModel {
            mu: vec![0.0],
            between_cov: rows(&[vec![1.0]]),
            within_cov: rows(&[vec![1.0]]),
        };
        let closed = plda_score(&model, &[1.0], &[1.0]).unwrap();
        // Simpson quadrature of int N(y;0,1) N(1;y,1) N(1;y,1) dy
        let gauss = |x: f64, m: f64, v: f64| {
            (-0.5 * (x - m) * (x - m) / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
        };
        let (lo, hi, n) = (-10.0f64, 10.0f64, 20000usize);
        let h = (hi - lo) / n as f64;
        let f = |y: f64| gauss(y, 0.0, 1.0) * gauss(1.0, y, 1.0) * gauss(1.0, y, 1.0);
        let mut same = f(lo) + f(hi);
        for i in 1..n {
            same += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        same *= h / 3.0;
        let diff = gauss(1.0, 0.0, 2.0) * gauss(1.0, 0.0, 2.0);
        let oracle = same.ln() - diff.ln();
        assert!((closed - oracle).abs() < 1e-6, "closed {closed} oracle {oracle}");
    }

    #[test]
    fn plda_score_symmetric_and_monotone() {
        let model = PldaModel {
            mu: vec![0.1, -0.2],
            between_cov: rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]),
            within_cov: rows(&[vec![0.8, 0.1], vec![0.1, 0.6]]),
        };
        let mut rng = RngStream::new(19);
        for _ in 0..20 {
            let a = rng.normals(2);
            let b = rng.normals(2);
            let s1 = plda_score(&model, &a, &b).unwrap();
            let s2 = plda_score(&model, &b, &a).unwrap();
            assert!((s1 - s2).abs() < 1e-10);
        }
        // moving enroll and test together along a high-B direction raises
        // the ratio
        let mut prev = f64::NEG_INFINITY;
        for i in 0..5 {
            let v = [i as f64 * 0.8, i as f64 * 0.2];
            let s = plda_score(&model, &v, &v).unwrap();
            assert!(s > prev, "not monotone at step {i}");
            prev = s;
        }
    }

    #[test]
    fn snorm_hand_cases() {
        assert!((snorm(2.0, &[0.0, 2.0], &[2.0, 4.0]).unwrap()).abs() < 1e-12);
        let s = snorm(1.5, &[0.5, 1.5, 2.5], &[0.5, 1.5, 2.5]).unwrap();
        assert!(s.abs() < 1e-12);
        assert!(snorm(1.0, &[2.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_score(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert!((cosine_score(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.7071068).abs() < 1e-6);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        // scale invariance
        let mut rng = RngStream::new(23);
        let a = rng.normals(5);
        let b = rng.normals(5);
        // power-of-two scales commute with IEEE rounding, so equality is exact
        let a2: Vec<f64> = a.iter().map(|v| 4.0 * v).collect();
        let b2: Vec<f64> = b.iter().map(|v| 0.25 * v).collect();
        assert_eq!(cosine_score(&a, &b).unwrap(), cosine_score(&a2, &b2).unwrap());
        let a3: Vec<f64> = a.iter().map(|v| 3.7 * v).collect();
        let b3: Vec<f64> = b.iter().map(|v| 0.2 * v).collect();
        let diff = cosine_score(&a, &b).unwrap() - cosine_score(&a3, &b3).unwrap();
        assert!(diff.abs() < 1e-14);
    }

    #[test]
    fn score_file_roundtrip() {
        let recs = vec![
            ScoreRecord { enroll_id: "a".into(), test_id: "b".into(), score: 1.25 },
            ScoreRecord { enroll_id: "a".into(), test_id: "c".into(), score: -0.333333 },
        ];
        let text = scores_to_text(&recs);
        assert_eq!(text, "a b 1.250000\na c -0.333333\n");
        assert_eq!(parse_scores(&text).unwrap(), recs);
        assert!(parse_scores("a b\n").is_err());
    }
}
