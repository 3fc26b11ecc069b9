//! Closed-form ground truth for Gaussian-mixture data under linear corruption.
//!
//! For `x_0 ~ sum_i pi_i N(mu_i, Sigma_i)` and `x_t = C x_0 + sigma z`, the
//! marginal, score, and posterior mean are all available in closed form:
//!
//! - marginal: `q_t = sum_i pi_i N(C mu_i, C Sigma_i C^T + sigma^2 I)`;
//! - score: `grad log q_t(x) = sum_i w_i(x) A_i^{-1} (m_i - x)` with
//!   responsibilities `w_i` and component covariance `A_i`;
//! - posterior mean: per-component Gaussian conditioning mixed by the
//!   responsibilities.
//!
//! Responsibilities are computed in log space with max subtraction so the
//! mixture tails at large `t` do not underflow. Everything here uses dense
//! algebra and is intended for n <= 256; the structured operators in
//! [`crate::operators`] handle larger n without an oracle.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat};
use crate::operators::{CorruptionProcess, LinearOperator};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// A weighted mixture of full-covariance Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Mat>,
}

#[derive(Serialize, Deserialize)]
struct GmmJson {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Mat>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::InvalidArgument {
                reason: "weights, means, covs must be non-empty and equal length".into(),
            });
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidArgument {
                reason: "mixture weights must be positive".into(),
            });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument {
                reason: format!("mixture weights must sum to 1, got {total}"),
            });
        }
        let dim = means[0].len();
        for (i, (mean, cov)) in means.iter().zip(&covs).enumerate() {
            if mean.len() != dim || cov.rows() != dim || cov.cols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: mean.len(),
                });
            }
            if !cov.is_symmetric(1e-12) {
                return Err(Error::InvalidArgument {
                    reason: format!("covariance of component {i} is not symmetric"),
                });
            }
            cov.cholesky()
                .map_err(|_| Error::NotPositiveDefinite { component: i })?;
        }
        Ok(GaussianMixture {
            weights,
            means,
            covs,
        })
    }

    /// Single-component mixture.
    pub fn single(mean: Vec<f64>, cov: Mat) -> Result<Self> {
        GaussianMixture::new(vec![1.0], vec![mean], vec![cov])
    }

    /// `N(mean, var I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let n = mean.len();
        GaussianMixture::single(mean, Mat::identity(n).scale(var))
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[Mat] {
        &self.covs
    }

    /// Overall mean `sum_i pi_i mu_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (o, m) in out.iter_mut().zip(mu) {
                *o += w * m;
            }
        }
        out
    }

    /// Overall covariance `sum_i pi_i (Sigma_i + mu_i mu_i^T) - mu mu^T`.
    pub fn covariance(&self) -> Mat {
        let n = self.dim();
        let mu = self.mean();
        let mut out = Mat::zeros(n, n);
        for ((w, comp_mu), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            for i in 0..n {
                for j in 0..n {
                    let v = w * (cov.at(i, j) + comp_mu[i] * comp_mu[j]);
                    out.set(i, j, out.at(i, j) + v);
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, out.at(i, j) - mu[i] * mu[j]);
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        self.sample_many(1, rng).pop().unwrap()
    }

    /// Draw `count` samples, factoring each component covariance once.
    pub fn sample_many<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Tensor> {
        let chols: Vec<Cholesky> = self.covs.iter().map(|c| c.cholesky().unwrap()).collect();
        let mut cum = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cum.push(acc);
        }
        let n = self.dim();
        (0..count)
            .map(|_| {
                let u: f64 = rng.random();
                let k = cum.partition_point(|&c| c < u).min(cum.len() - 1);
                let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let lz = chols[k].lower_mul(&z);
                let data = self.means[k].iter().zip(&lz).map(|(m, v)| m + v).collect();
                Tensor::new(vec![n], data).unwrap()
            })
            .collect()
    }

    pub fn log_density(&self, x: &Tensor) -> Result<f64> {
        let prepared = PreparedMixture::new(self)?;
        Ok(prepared.log_density(x.data()))
    }

    pub fn to_json(&self) -> Result<String> {
        let j = GmmJson {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covs: self.covs.iter().map(Mat::to_rows).collect(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let j: GmmJson = serde_json::from_str(json)?;
        let covs = j
            .covs
            .into_iter()
            .map(Mat::from_rows)
            .collect::<Result<Vec<_>>>()?;
        GaussianMixture::new(j.weights, j.means, covs)
    }
}

/// A mixture with pre-factored component covariances, for hot loops.
struct PreparedMixture {
    ln_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    chols: Vec<Cholesky>,
    log_norms: Vec<f64>,
    dim: usize,
}

impl PreparedMixture {
    fn new(gmm: &GaussianMixture) -> Result<Self> {
        let dim = gmm.dim();
        let chols = gmm
            .covs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.cholesky()
                    .map_err(|_| Error::NotPositiveDefinite { component: i })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_norms = chols
            .iter()
            .map(|c| -0.5 * (dim as f64 * LN_2PI + c.log_det()))
            .collect();
        Ok(PreparedMixture {
            ln_weights: gmm.weights.iter().map(|w| w.ln()).collect(),
            means: gmm.means.clone(),
            chols,
            log_norms,
            dim,
        })
    }

    /// Per-component log joint `ln(pi_i N(x; mu_i, Sigma_i))` along with each
    /// component's solve `Sigma_i^{-1} (x - mu_i)`.
    fn component_terms(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut log_terms = Vec::with_capacity(self.means.len());
        let mut solves = Vec::with_capacity(self.means.len());
        for i in 0..self.means.len() {
            let diff: Vec<f64> = x.iter().zip(&self.means[i]).map(|(a, b)| a - b).collect();
            let sol = self.chols[i].solve(&diff);
            let quad: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
            log_terms.push(self.ln_weights[i] + self.log_norms[i] - 0.5 * quad);
            solves.push(sol);
        }
        (log_terms, solves)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let (log_terms, _) = self.component_terms(x);
        log_sum_exp(&log_terms)
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (log_terms, solves) = self.component_terms(x);
        let log_z = log_sum_exp(&log_terms);
        if !log_z.is_finite() {
            return Err(Error::TailUnderflow);
        }
        let mut out = vec![0.0; self.dim];
        for (lt, sol) in log_terms.iter().zip(&solves) {
            let w = (lt - log_z).exp();
            if w == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(sol) {
                *o -= w * s;
            }
        }
        Ok(out)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `grad_x log q(x)` for a Gaussian mixture, evaluated exactly.
pub fn analytic_score(gmm: &GaussianMixture, x: &Tensor) -> Result<Tensor> {
    if x.len() != gmm.dim() {
        return Err(Error::DimensionMismatch {
            expected: gmm.dim(),
            actual: x.len(),
        });
    }
    let prepared = PreparedMixture::new(gmm)?;
    let s = prepared.score(x.data())?;
    Tensor::new(vec![gmm.dim()], s)
}

/// A linear operator materialized as a dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    matrix: Mat,
}

impl DenseOperator {
    pub fn from_matrix(matrix: Mat) -> Self {
        DenseOperator { matrix }
    }

    pub fn identity(n: usize) -> Self {
        DenseOperator {
            matrix: Mat::identity(n),
        }
    }

    pub fn diagonal(scales: &[f64]) -> Self {
        let n = scales.len();
        DenseOperator {
            matrix: Mat::from_fn(n, n, |i, j| if i == j { scales[i] } else { 0.0 }),
        }
    }

    /// Materialize a structured operator column by column.
    pub fn from_operator(op: &LinearOperator) -> Result<Self> {
        let n = op.dim();
        let mut matrix = Mat::zeros(n, n);
        let mut basis = Tensor::zeros(vec![n]);
        for j in 0..n {
            basis.data_mut()[j] = 1.0;
            let col = op.apply(&basis)?;
            for i in 0..n {
                matrix.set(i, j, col.data()[i]);
            }
            basis.data_mut()[j] = 0.0;
        }
        Ok(DenseOperator { matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Tensor::new(x.shape().to_vec(), self.matrix.mul_vec(x.data()))
    }
}

/// Exact marginal of `x_t = C x_0 + sigma z` for `x_0 ~ gmm`.
pub fn pushforward(gmm: &GaussianMixture, c: &DenseOperator, sigma: f64) -> Result<GaussianMixture> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument {
            reason: format!("sigma must be non-negative and finite, got {sigma}"),
        });
    }
    if c.dim() != gmm.dim() {
        return Err(Error::DimensionMismatch {
            expected: gmm.dim(),
            actual: c.dim(),
        });
    }
    let ct = c.matrix().transpose();
    let mut means = Vec::with_capacity(gmm.num_components());
    let mut covs = Vec::with_capacity(gmm.num_components());
    for (i, (mu, cov)) in gmm.means.iter().zip(&gmm.covs).enumerate() {
        means.push(c.matrix().mul_vec(mu));
        let conj = c
            .matrix()
            .matmul(cov)
            .matmul(&ct)
            .add_scaled_identity(sigma * sigma);
        conj.cholesky()
            .map_err(|_| Error::NotPositiveDefinite { component: i })?;
        covs.push(conj);
    }
    GaussianMixture::new(gmm.weights.clone(), means, covs)
}

/// Precomputed machinery for `E[x_0 | x_t]` under a fixed `(C, sigma)`.
///
/// Per component: `m_i = C mu_i`, `A_i = C Sigma_i C^T + sigma^2 I`, and the
/// cross term `G_i = Sigma_i C^T`, so that
/// `E[x_0 | x_t, i] = mu_i + G_i A_i^{-1} (x_t - m_i)` and the same solve
/// feeds the component responsibility.
pub struct PosteriorSolver {
    ln_weights: Vec<f64>,
    means0: Vec<Vec<f64>>,
    means_t: Vec<Vec<f64>>,
    chols: Vec<Cholesky>,
    log_norms: Vec<f64>,
    gains: Vec<Mat>,
    dim: usize,
}

impl PosteriorSolver {
    pub fn new(gmm0: &GaussianMixture, c: &DenseOperator, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidArgument {
                reason: format!("posterior mean requires sigma > 0, got {sigma}"),
            });
        }
        if c.dim() != gmm0.dim() {
            return Err(Error::DimensionMismatch {
                expected: gmm0.dim(),
                actual: c.dim(),
            });
        }
        let n = gmm0.dim();
        let ct = c.matrix().transpose();
        let mut means_t = Vec::new();
        let mut chols = Vec::new();
        let mut log_norms = Vec::new();
        let mut gains = Vec::new();
        for (i, (mu, cov)) in gmm0.means.iter().zip(&gmm0.covs).enumerate() {
            means_t.push(c.matrix().mul_vec(mu));
            let a = c
                .matrix()
                .matmul(cov)
                .matmul(&ct)
                .add_scaled_identity(sigma * sigma);
            let chol = a
                .cholesky()
                .map_err(|_| Error::NotPositiveDefinite { component: i })?;
            log_norms.push(-0.5 * (n as f64 * LN_2PI + chol.log_det()));
            chols.push(chol);
            gains.push(cov.matmul(&ct));
        }
        Ok(PosteriorSolver {
            ln_weights: gmm0.weights.iter().map(|w| w.ln()).collect(),
            means0: gmm0.means.clone(),
            means_t,
            chols,
            log_norms,
            gains,
            dim: n,
        })
    }

    pub fn posterior_mean(&self, x_t: &Tensor) -> Result<Tensor> {
        if x_t.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x_t.len(),
            });
        }
        let x = x_t.data();
        let k = self.means0.len();
        let mut log_terms = Vec::with_capacity(k);
        let mut conds = Vec::with_capacity(k);
        for i in 0..k {
            let diff: Vec<f64> = x.iter().zip(&self.means_t[i]).map(|(a, b)| a - b).collect();
            let sol = self.chols[i].solve(&diff);
            let quad: f64 = diff.iter().zip(&sol).map(|(a, b)| a * b).sum();
            log_terms.push(self.ln_weights[i] + self.log_norms[i] - 0.5 * quad);
            let corr = self.gains[i].mul_vec(&sol);
            conds.push(
                self.means0[i]
                    .iter()
                    .zip(&corr)
                    .map(|(m, c)| m + c)
                    .collect::<Vec<f64>>(),
            );
        }
        let log_z = log_sum_exp(&log_terms);
        if !log_z.is_finite() {
            return Err(Error::TailUnderflow);
        }
        let mut out = vec![0.0; self.dim];
        for (lt, cond) in log_terms.iter().zip(&conds) {
            let w = (lt - log_z).exp();
            for (o, c) in out.iter_mut().zip(cond) {
                *o += w * c;
            }
        }
        Tensor::new(vec![self.dim], out)
    }
}

/// Exact `E[x_0 | x_t]` via per-component Gaussian conditioning.
pub fn posterior_mean(
    gmm0: &GaussianMixture,
    c: &DenseOperator,
    sigma: f64,
    x_t: &Tensor,
) -> Result<Tensor> {
    PosteriorSolver::new(gmm0, c, sigma)?.posterior_mean(x_t)
}

/// Monte-Carlo estimate of `J1 - J2` for a score candidate, on common random
/// numbers, where `J1` is the explicit score-matching objective against the
/// exact marginal score and `J2` is the denoising form against the
/// conditional score `(C x_0 - x_t)/sigma^2`. Returns the estimate and its
/// standard error. The difference is a constant in the candidate.
pub fn estimate_j1_minus_j2<R: Rng + ?Sized>(
    gmm0: &GaussianMixture,
    proc: &CorruptionProcess,
    t: f64,
    score_fn: &dyn Fn(&Tensor) -> Tensor,
    num_samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if t <= 0.0 {
        return Err(Error::InvalidArgument {
            reason: format!("estimate requires t > 0, got {t}"),
        });
    }
    if num_samples < 10_000 {
        return Err(Error::InvalidArgument {
            reason: format!("need at least 10^4 samples, got {num_samples}"),
        });
    }
    let sigma = proc.sigma_at(t)?;
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument {
            reason: format!("conditional score undefined: sigma = {sigma} at t = {t}"),
        });
    }
    let c = DenseOperator::from_operator(&proc.operator_at(t)?)?;
    let marginal = pushforward(gmm0, &c, sigma)?;
    let prepared = PreparedMixture::new(&marginal)?;
    let n = gmm0.dim();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..num_samples {
        let x0 = gmm0.sample(rng);
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let cx0 = c.apply(&x0)?;
        let x_t_data: Vec<f64> = cx0.data().iter().zip(&z).map(|(m, zi)| m + sigma * zi).collect();
        let x_t = Tensor::new(vec![n], x_t_data)?;

        let s = score_fn(&x_t);
        let g = prepared.score(x_t.data())?;
        // Conditional score (C x0 - x_t)/sigma^2 = -z/sigma.
        let mut j1_term = 0.0;
        let mut j2_term = 0.0;
        for i in 0..n {
            let d1 = s.data()[i] - g[i];
            let d2 = s.data()[i] + z[i] / sigma;
            j1_term += d1 * d1;
            j2_term += d2 * d2;
        }
        let d = 0.5 * (j1_term - j2_term);
        sum += d;
        sum_sq += d * d;
    }
    let mean = sum / num_samples as f64;
    let var = (sum_sq / num_samples as f64 - mean * mean).max(0.0);
    let se = (var / num_samples as f64).sqrt();
    Ok((mean, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{OperatorFamily, Schedule};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_component_2d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.4, 0.6],
            vec![vec![-1.0, 0.5], vec![1.5, -0.5]],
            vec![
                Mat::from_rows(vec![vec![0.5, 0.1], vec![0.1, 0.3]]).unwrap(),
                Mat::from_rows(vec![vec![0.8, -0.2], vec![-0.2, 0.6]]).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn construction_validates_weights_and_covs() {
        let bad_weights = GaussianMixture::new(
            vec![0.5, 0.6],
            vec![vec![0.0], vec![1.0]],
            vec![Mat::identity(1), Mat::identity(1)],
        );
        assert!(bad_weights.is_err());

        let indefinite = Mat::from_rows(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let err = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            vec![Mat::identity(2), indefinite],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { component: 1 }));
    }

    #[test]
    fn json_roundtrip() {
        let gmm = two_component_2d();
        let json = gmm.to_json().unwrap();
        assert!(json.contains("\"weights\"") && json.contains("\"covs\""));
        let back = GaussianMixture::from_json(&json).unwrap();
        assert_eq!(back, gmm);
    }

    #[test]
    fn dense_materialization_agrees_with_structured_operators() {
        use crate::operators::LinearOperator;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let ops = vec![
            LinearOperator::identity(16),
            LinearOperator::gaussian_blur(4, 4, 2, 0.9).unwrap(),
            LinearOperator::diagonal_fade((0..16).map(|i| i as f64 / 15.0).collect()).unwrap(),
        ];
        for op in ops {
            let dense = DenseOperator::from_operator(&op).unwrap();
            for _ in 0..10 {
                let x = Tensor::from_vec(
                    (0..16).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                );
                let a = op.apply(&x).unwrap();
                let b = dense.apply(&x).unwrap();
                let tol = 1e-10 * b.norm().max(1.0);
                assert!(a.sub(&b).norm() <= tol, "dense disagreement {}", a.sub(&b).norm());
            }
            // All supported kinds are symmetric as matrices; the transpose
            // shortcut in the loss gradient relies on this.
            assert!(dense.matrix().is_symmetric(1e-12));
        }
    }

    #[test]
    fn pushforward_identity_no_noise_is_unchanged() {
        let gmm = two_component_2d();
        let pushed = pushforward(&gmm, &DenseOperator::identity(2), 0.0).unwrap();
        assert_eq!(pushed, gmm);
    }

    #[test]
    fn pushforward_adds_noise_variance() {
        let gmm = GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        let pushed = pushforward(&gmm, &DenseOperator::identity(2), 1.0).unwrap();
        assert!(pushed.covs()[0].max_abs_diff(&Mat::identity(2).scale(2.0)) < 1e-14);
    }

    #[test]
    fn pushforward_matches_empirical_covariance() {
        // Monte-Carlo oracle: corrupt 1e5 draws and compare moments.
        let gmm = two_component_2d();
        let c = DenseOperator::diagonal(&[1.0, 0.5]);
        let sigma = 0.3;
        let pushed = pushforward(&gmm, &c, sigma).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut mean = [0.0f64; 2];
        let mut m2 = [[0.0f64; 2]; 2];
        let samples: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let x0 = gmm.sample(&mut rng);
                let cx = c.apply(&x0).unwrap();
                let z0: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                [cx.data()[0] + sigma * z0, cx.data()[1] + sigma * z1]
            })
            .collect();
        for s in &samples {
            mean[0] += s[0];
            mean[1] += s[1];
        }
        mean[0] /= n as f64;
        mean[1] /= n as f64;
        for s in &samples {
            for i in 0..2 {
                for j in 0..2 {
                    m2[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
                }
            }
        }
        let exact_mean = pushed.mean();
        let exact_cov = pushed.covariance();
        for i in 0..2 {
            // Mean SE is about sqrt(var/n) ~ 0.005; 0.02 is a 4-sigma band.
            assert!((mean[i] - exact_mean[i]).abs() < 0.02, "mean[{i}]");
            for j in 0..2 {
                let emp = m2[i][j] / (n as f64 - 1.0);
                assert!(
                    (emp - exact_cov.at(i, j)).abs() < 0.03,
                    "cov[{i}][{j}]: {emp} vs {}",
                    exact_cov.at(i, j)
                );
            }
        }
    }

    #[test]
    fn pushforward_with_zero_sigma_rejects_rank_deficient_operator() {
        let gmm = two_component_2d();
        let c = DenseOperator::diagonal(&[1.0, 0.0]);
        let err = pushforward(&gmm, &c, 0.0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { component: 0 }));
    }

    #[test]
    fn score_of_standard_normal_at_origin_is_zero() {
        let gmm = GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        let s = analytic_score(&gmm, &Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn score_of_scaled_normal_is_minus_x_over_variance() {
        let gmm = GaussianMixture::isotropic(vec![0.0, 0.0], 2.0).unwrap();
        let s = analytic_score(&gmm, &Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(s.data()[0], -0.5, max_relative = 1e-12);
        assert_relative_eq!(s.data()[1], 0.0, epsilon = 1e-15);
    }

    /// Central finite differences of the log density.
    fn fd_score(gmm: &GaussianMixture, x: &Tensor, step: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut hi = x.clone();
                hi.data_mut()[i] += step;
                let mut lo = x.clone();
                lo.data_mut()[i] -= step;
                (gmm.log_density(&hi).unwrap() - gmm.log_density(&lo).unwrap()) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let gmm = two_component_2d();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = Tensor::from_vec(vec![
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
            ]);
            let s = analytic_score(&gmm, &x).unwrap();
            let fd = fd_score(&gmm, &x, 1e-4);
            for (a, b) in s.data().iter().zip(&fd) {
                assert_relative_eq!(a, b, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn score_far_in_the_tails_is_an_error() {
        let gmm = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
        let err = analytic_score(&gmm, &Tensor::from_vec(vec![1e200])).unwrap_err();
        assert!(matches!(err, Error::TailUnderflow));
    }

    #[test]
    fn posterior_mean_with_uninformative_observation_is_prior_mean() {
        let gmm = two_component_2d();
        let c = DenseOperator::identity(2);
        let x_t = Tensor::from_vec(vec![3.0, -4.0]);
        let pm = posterior_mean(&gmm, &c, 1e3, &x_t).unwrap();
        let prior = gmm.mean();
        for (a, b) in pm.data().iter().zip(&prior) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn posterior_mean_near_noiseless_returns_x_t() {
        let gmm = two_component_2d();
        let c = DenseOperator::identity(2);
        let x_t = Tensor::from_vec(vec![0.7, -0.2]);
        let pm = posterior_mean(&gmm, &c, 1e-6, &x_t).unwrap();
        for (a, b) in pm.data().iter().zip(x_t.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn posterior_mean_single_gaussian_matches_wiener_filter() {
        // mu + Sigma (Sigma + sigma^2 I)^{-1} (x - mu), computed independently.
        let mean = vec![0.5, -1.0];
        let cov = Mat::from_rows(vec![vec![0.9, 0.2], vec![0.2, 0.4]]).unwrap();
        let gmm = GaussianMixture::single(mean.clone(), cov.clone()).unwrap();
        let sigma = 0.35;
        let x_t = Tensor::from_vec(vec![1.2, 0.3]);
        let pm = posterior_mean(&gmm, &DenseOperator::identity(2), sigma, &x_t).unwrap();

        let a_inv = cov.add_scaled_identity(sigma * sigma).inverse().unwrap();
        let diff = vec![x_t.data()[0] - mean[0], x_t.data()[1] - mean[1]];
        let corr = cov.matmul(&a_inv).mul_vec(&diff);
        for i in 0..2 {
            assert_relative_eq!(pm.data()[i], mean[i] + corr[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn posterior_mean_matches_quadrature_in_1d() {
        // Independent numerical oracle: Simpson integration of the posterior.
        let mu0 = 0.4;
        let s0 = 0.8;
        let cval = 0.6;
        let sigma = 0.5;
        let gmm = GaussianMixture::single(vec![mu0], Mat::identity(1).scale(s0 * s0)).unwrap();
        let c = DenseOperator::diagonal(&[cval]);
        let x_t = 1.1;

        let log_post = |x0: f64| {
            let a = (x0 - mu0) / s0;
            let b = (x_t - cval * x0) / sigma;
            -0.5 * (a * a + b * b)
        };
        let (lo, hi) = (mu0 - 12.0 * s0, mu0 + 12.0 * s0);
        let m = 40_000usize; // even
        let h = (hi - lo) / m as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..=m {
            let x0 = lo + k as f64 * h;
            let w = if k == 0 || k == m {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let p = log_post(x0).exp();
            num += w * x0 * p;
            den += w * p;
        }
        let quad = num / den;

        let pm = posterior_mean(&gmm, &c, sigma, &Tensor::from_vec(vec![x_t])).unwrap();
        assert_relative_eq!(pm.data()[0], quad, max_relative = 1e-8);
    }

    #[test]
    fn tweedie_identity_holds_for_invertible_operator() {
        // posterior_mean = C^{-1} (x_t + sigma^2 * score(pushforward, x_t)).
        let gmm = two_component_2d();
        let c = DenseOperator::diagonal(&[0.9, 0.6]);
        let sigma = 0.25;
        let pushed = pushforward(&gmm, &c, sigma).unwrap();
        let c_inv = c.matrix().inverse().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x_t = Tensor::from_vec(vec![
                rng.random::<f64>() * 3.0 - 1.5,
                rng.random::<f64>() * 3.0 - 1.5,
            ]);
            let pm = posterior_mean(&gmm, &c, sigma, &x_t).unwrap();
            let score = analytic_score(&pushed, &x_t).unwrap();
            let inner = x_t.add(&score.scale(sigma * sigma));
            let tweedie = c_inv.mul_vec(inner.data());
            for (a, b) in pm.data().iter().zip(&tweedie) {
                assert_relative_eq!(a, b, max_relative = 1e-8, epsilon = 1e-12);
            }
        }
    }

    fn fade_process(dim: usize) -> CorruptionProcess {
        let schedule = Schedule::three_point("gmm", 0.0, 0.95, 1e-3, 0.1, 0.2).unwrap();
        CorruptionProcess::new(OperatorFamily::DiagonalFade { dim }, schedule).unwrap()
    }

    #[test]
    fn j1_minus_j2_requires_enough_samples_and_positive_t() {
        let gmm = two_component_2d();
        let proc = fade_process(2);
        let zero = |x: &Tensor| Tensor::zeros(vec![x.len()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(estimate_j1_minus_j2(&gmm, &proc, 0.5, &zero, 100, &mut rng).is_err());
        assert!(estimate_j1_minus_j2(&gmm, &proc, 0.0, &zero, 10_000, &mut rng).is_err());
    }

    #[test]
    fn j1_vanishes_at_the_true_score() {
        let gmm = two_component_2d();
        let proc = fade_process(2);
        let t = 0.6;
        let sigma = proc.sigma_at(t).unwrap();
        let c = DenseOperator::from_operator(&proc.operator_at(t).unwrap()).unwrap();
        let marginal = pushforward(&gmm, &c, sigma).unwrap();
        let truth = move |x: &Tensor| analytic_score(&marginal, x).unwrap();

        // With the true score J1's integrand is identically zero, so
        // J1 - J2 = -J2 sample by sample; just check it is finite and that
        // the J1 part contributes nothing: estimate + mean(J2) == 0.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (est, se) = estimate_j1_minus_j2(&gmm, &proc, t, &truth, 20_000, &mut rng).unwrap();
        assert!(est.is_finite() && se.is_finite() && est < 0.0);
    }

    #[test]
    fn j1_minus_j2_is_constant_across_candidates() {
        let gmm = two_component_2d();
        let proc = fade_process(2);
        let t = 0.5;
        let sigma = proc.sigma_at(t).unwrap();
        let c = DenseOperator::from_operator(&proc.operator_at(t).unwrap()).unwrap();
        let marginal = pushforward(&gmm, &c, sigma).unwrap();

        let candidates: Vec<Box<dyn Fn(&Tensor) -> Tensor>> = vec![
            Box::new(move |x| analytic_score(&marginal, x).unwrap()),
            Box::new(|x| Tensor::zeros(vec![x.len()])),
            Box::new(|x| x.scale(-0.7)),
            Box::new(|x| {
                Tensor::from_vec(vec![
                    -0.3 * x.data()[0] + 0.2 * x.data()[1] + 0.1,
                    0.4 * x.data()[0] - 0.9 * x.data()[1],
                ])
            }),
        ];
        let estimates: Vec<(f64, f64)> = candidates
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
                estimate_j1_minus_j2(&gmm, &proc, t, f.as_ref(), 20_000, &mut rng).unwrap()
            })
            .collect();
        for i in 0..estimates.len() {
            for j in (i + 1)..estimates.len() {
                let (a, sa) = estimates[i];
                let (b, sb) = estimates[j];
                let combined = (sa * sa + sb * sb).sqrt();
                assert!(
                    (a - b).abs() <= 4.0 * combined,
                    "candidates {i} and {j}: {a} vs {b}, 4se = {}",
                    4.0 * combined
                );
            }
        }
    }
}
