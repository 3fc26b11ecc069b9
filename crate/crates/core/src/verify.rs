//! Independent reference implementations and runnable verification suites.
//!
//! Everything in this module deliberately avoids the code paths it checks:
//! the VE predictor is written from the variance-exploding update directly,
//! shortest paths are enumerated over all simple paths, Gaussian chain
//! moments are propagated analytically instead of sampling, and gradient
//! checks use central finite differences. The CLI `verify` command runs the
//! suites; the acceptance tests call them with their full sample budgets.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{ModelConfig, ScoreModel};
use crate::operators::CorruptionProcess;
use crate::oracle::{DenseOperator, GaussianMixture};
use crate::sampler::{Denoiser, SamplerKind, TerminalDistribution};
use crate::tensor::Tensor;

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {} — {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// Independent variance-exploding predictor step: the reverse update for a
/// pure-noise corruption, `x + (sigma_t^2 - sigma_prev^2) s + sqrt(.) eta`
/// with the score estimated from the denoiser as `(x_hat0 - x)/sigma_t^2`.
/// Never touches the operator machinery.
pub fn ve_predictor_step_reference<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: f64,
    dt: f64,
    denoiser: &dyn Denoiser,
    proc: &CorruptionProcess,
    rng: &mut R,
) -> Result<Tensor> {
    let t_prev = t - dt;
    if t_prev < 0.0 {
        return Err(Error::TimeOutOfRange { t: t_prev });
    }
    let sigma_t = proc.sigma_at(t)?;
    let sigma_prev = proc.sigma_at(t_prev)?;
    if sigma_prev > sigma_t {
        return Err(Error::SigmaDecreasing {
            t,
            sigma_t,
            t_prev,
            sigma_prev,
        });
    }
    let x_hat0 = denoiser.predict_clean(x_t, t)?;
    let sigma_t_sq = sigma_t * sigma_t;
    let dv = sigma_t_sq - sigma_prev * sigma_prev;
    let mut out = x_t.clone();
    if dv > 0.0 {
        let root = dv.sqrt();
        let od = out.data_mut();
        for i in 0..od.len() {
            let s = (x_hat0.data()[i] - x_t.data()[i]) / sigma_t_sq;
            let eta: f64 = rng.sample(StandardNormal);
            od[i] = x_t.data()[i] + dv * s + root * eta;
        }
    }
    Ok(out)
}

/// Minimum-cost simple path found by exhaustive depth-first enumeration.
/// `weights[i][j] = f64::INFINITY` marks an absent edge. Returns the cost,
/// the first optimal path in lexicographic DFS order, and how many distinct
/// paths attain the optimum (ties within 1e-12 relative).
pub fn exhaustive_shortest_path(
    weights: &[Vec<f64>],
    from: usize,
    to: usize,
) -> Option<(f64, Vec<usize>, usize)> {
    struct Dfs<'a> {
        w: &'a [Vec<f64>],
        to: usize,
        visited: Vec<bool>,
        path: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
        ties: usize,
    }
    impl Dfs<'_> {
        fn go(&mut self, node: usize, cost: f64) {
            if node == self.to {
                match &self.best {
                    Some((b, _)) if (cost - b).abs() <= 1e-12 * b.abs().max(1.0) => {
                        self.ties += 1;
                    }
                    Some((b, _)) if cost >= *b => {}
                    _ => {
                        self.best = Some((cost, self.path.clone()));
                        self.ties = 1;
                    }
                }
                return;
            }
            for next in 0..self.w.len() {
                let edge = self.w[node][next];
                if next == node || self.visited[next] || !edge.is_finite() {
                    continue;
                }
                self.visited[next] = true;
                self.path.push(next);
                self.go(next, cost + edge);
                self.path.pop();
                self.visited[next] = false;
            }
        }
    }
    let n = weights.len();
    let mut dfs = Dfs {
        w: weights,
        to,
        visited: vec![false; n],
        path: vec![from],
        best: None,
        ties: 0,
    };
    dfs.visited[from] = true;
    dfs.go(from, 0.0);
    dfs.best.map(|(c, p)| (c, p, dfs.ties))
}

/// Principal square root of a 2x2 SPD matrix (closed form).
pub fn sqrtm_2x2(m: &Mat) -> Mat {
    assert_eq!((m.rows(), m.cols()), (2, 2));
    let det = m.at(0, 0) * m.at(1, 1) - m.at(0, 1) * m.at(1, 0);
    let s = det.max(0.0).sqrt();
    let tau = (m.at(0, 0) + m.at(1, 1) + 2.0 * s).sqrt();
    m.add_scaled_identity(s).scale(1.0 / tau)
}

/// Exact 2-Wasserstein distance between 2-D Gaussians.
pub fn gaussian_w2_2d(mean_a: &[f64], cov_a: &Mat, mean_b: &[f64], cov_b: &Mat) -> f64 {
    let dm: f64 = mean_a
        .iter()
        .zip(mean_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let rb = sqrtm_2x2(cov_b);
    let inner = rb.matmul(cov_a).matmul(&rb);
    let cross = sqrtm_2x2(&inner);
    let trace = cov_a.at(0, 0) + cov_a.at(1, 1) + cov_b.at(0, 0) + cov_b.at(1, 1)
        - 2.0 * (cross.at(0, 0) + cross.at(1, 1));
    (dm + trace.max(0.0)).sqrt()
}

/// Empirical mean and covariance of a 2-D point set.
pub fn empirical_moments_2d(samples: &[Tensor]) -> (Vec<f64>, Mat) {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; 2];
    for s in samples {
        mean[0] += s.data()[0];
        mean[1] += s.data()[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut cov = Mat::zeros(2, 2);
    for s in samples {
        let d0 = s.data()[0] - mean[0];
        let d1 = s.data()[1] - mean[1];
        cov.set(0, 0, cov.at(0, 0) + d0 * d0);
        cov.set(0, 1, cov.at(0, 1) + d0 * d1);
        cov.set(1, 0, cov.at(1, 0) + d1 * d0);
        cov.set(1, 1, cov.at(1, 1) + d1 * d1);
    }
    (mean, cov.scale(1.0 / (n - 1.0)))
}

/// Exact mean/covariance of the sampler chain on single-Gaussian data with
/// the posterior-mean denoiser. Every update is affine, so the marginal at
/// each grid time is Gaussian and can be propagated without sampling. This is
/// the brute-force oracle for sampler bias/variance claims.
pub fn gaussian_chain_moments(
    kind: SamplerKind,
    gmm: &GaussianMixture,
    proc: &CorruptionProcess,
    p1: &TerminalDistribution,
    num_steps: usize,
) -> Result<(Vec<f64>, Mat)> {
    if gmm.num_components() != 1 {
        return Err(Error::InvalidArgument {
            reason: "chain moments require a single-component Gaussian".into(),
        });
    }
    let n = gmm.dim();
    let mu = gmm.means()[0].clone();
    let cov0 = gmm.covs()[0].clone();

    let mut m: Vec<f64> = p1.mean.data().to_vec();
    let mut s = Mat::identity(n).scale(p1.sigma * p1.sigma);

    for k in (1..=num_steps).rev() {
        let t = k as f64 / num_steps as f64;
        let t_prev = (k - 1) as f64 / num_steps as f64;
        let c = DenseOperator::from_operator(&proc.operator_at(t)?)?;
        let c_prev = DenseOperator::from_operator(&proc.operator_at(t_prev)?)?;
        let sigma = proc.sigma_at(t)?;
        let sigma_prev = proc.sigma_at(t_prev)?;

        let a = c
            .matrix()
            .matmul(&cov0)
            .matmul(&c.matrix().transpose())
            .add_scaled_identity(sigma * sigma);
        let a_inv = a.inverse()?;
        // Posterior gain: x_hat0 = mu + K (x - C mu).
        let gain = cov0.matmul(&c.matrix().transpose()).matmul(&a_inv);
        let c_mu = c.matrix().mul_vec(&mu);
        let centered: Vec<f64> = m.iter().zip(&c_mu).map(|(a, b)| a - b).collect();

        match kind {
            SamplerKind::Naive => {
                // x' = C' (mu + K (x - C mu)) + sigma' eta.
                let d = c_prev.matrix().matmul(&gain);
                let mut m_next = c_prev.matrix().mul_vec(&mu);
                for (mi, v) in m_next.iter_mut().zip(d.mul_vec(&centered)) {
                    *mi += v;
                }
                m = m_next;
                s = d
                    .matmul(&s)
                    .matmul(&d.transpose())
                    .add_scaled_identity(sigma_prev * sigma_prev);
            }
            SamplerKind::Momentum => {
                // Normalized mode: with the exact posterior mean the noise
                // estimate equals the marginal score -A^{-1}(x - C mu), so
                // x' = B (x - C mu) + C' mu + sqrt(dv) eta with
                // B = I + (sigma'^2 - sigma^2) A^{-1} + (C' - C) K.
                let dv = sigma * sigma - sigma_prev * sigma_prev;
                let diff_c = c_prev.matrix().add(&c.matrix().scale(-1.0));
                let b = Mat::identity(n)
                    .add(&a_inv.scale(sigma_prev * sigma_prev - sigma * sigma))
                    .add(&diff_c.matmul(&gain));
                let mut m_next = c_prev.matrix().mul_vec(&mu);
                for (mi, v) in m_next.iter_mut().zip(b.mul_vec(&centered)) {
                    *mi += v;
                }
                m = m_next;
                s = b.matmul(&s).matmul(&b.transpose()).add_scaled_identity(dv);
            }
        }
    }
    Ok((m, s))
}

/// Architectures exercised by gradient checks.
pub fn test_architectures() -> Vec<ModelConfig> {
    vec![
        ModelConfig {
            input_dim: 2,
            hidden_width: 16,
            hidden_layers: 1,
            time_frequencies: 4,
            freq_min: 1.0,
            freq_max: 100.0,
        },
        ModelConfig {
            input_dim: 3,
            hidden_width: 24,
            hidden_layers: 2,
            time_frequencies: 8,
            freq_min: 1.0,
            freq_max: 1000.0,
        },
        ModelConfig {
            input_dim: 8,
            hidden_width: 32,
            hidden_layers: 3,
            time_frequencies: 16,
            freq_min: 1.0,
            freq_max: 1000.0,
        },
    ]
}

/// Reverse-mode gradients against central finite differences on every test
/// architecture: `samples` random parameter indices each, relative error at
/// most `tol`.
pub fn gradient_check_suite(samples: usize, tol: f64, seed: u64) -> CheckReport {
    use rand::SeedableRng;
    let mut worst: f64 = 0.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for cfg in test_architectures() {
        let mut model = ScoreModel::new(cfg, &mut rng);
        for p in model.params_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p = 0.3 * z;
        }
        let n = cfg.input_dim;
        let x = Tensor::from_vec((0..n).map(|_| rng.random::<f64>() - 0.5).collect());
        let t = rng.random::<f64>();
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();

        let (_, tape) = model.forward_with_tape(&x, t).unwrap();
        let mut analytic = vec![0.0; model.param_count()];
        model.backward(&tape, &u, &mut analytic).unwrap();

        let delta = 1e-5;
        for _ in 0..samples {
            let idx = rng.random_range(0..model.param_count());
            let orig = model.params()[idx];
            let eval = |m: &ScoreModel| -> f64 {
                m.forward(&x, t)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&u)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            model.params_mut()[idx] = orig + delta;
            let hi = eval(&model);
            model.params_mut()[idx] = orig - delta;
            let lo = eval(&model);
            model.params_mut()[idx] = orig;
            let fd = (hi - lo) / (2.0 * delta);
            let denom = fd.abs().max(analytic[idx].abs()).max(1e-6);
            worst = worst.max((fd - analytic[idx]).abs() / denom);
        }
    }
    CheckReport {
        name: "gradient-check".into(),
        passed: worst <= tol,
        detail: format!("max relative error {worst:.3e} (tol {tol:.1e})"),
    }
}

/// The constancy of `J1 - J2` across score candidates (the score-matching
/// identity). All pairwise differences must sit within 4 combined standard
/// errors of zero, at each requested t.
pub fn score_identity_suite(
    gmm: &GaussianMixture,
    proc: &CorruptionProcess,
    ts: &[f64],
    num_samples: usize,
    seed: u64,
) -> Result<CheckReport> {
    use crate::oracle::{analytic_score, estimate_j1_minus_j2, pushforward};
    use rand::SeedableRng;

    let mut worst_z: f64 = 0.0;
    for (ti, &t) in ts.iter().enumerate() {
        let sigma = proc.sigma_at(t)?;
        let c = DenseOperator::from_operator(&proc.operator_at(t)?)?;
        let marginal = pushforward(gmm, &c, sigma)?;
        let marginal2 = marginal.clone();

        let candidates: Vec<Box<dyn Fn(&Tensor) -> Tensor>> = vec![
            Box::new(move |x| analytic_score(&marginal2, x).unwrap()),
            Box::new(|x| Tensor::zeros(vec![x.len()])),
            Box::new(|x| x.scale(-0.5)),
            Box::new(|x| {
                Tensor::from_vec(vec![
                    -0.4 * x.data()[0] + 0.3 * x.data()[1] - 0.2,
                    0.1 * x.data()[0] - 0.8 * x.data()[1] + 0.5,
                ])
            }),
            Box::new(|x| x.scale(0.25).add(&Tensor::from_vec(vec![1.0, -1.0]))),
        ];
        let estimates: Vec<(f64, f64)> = candidates
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    seed ^ ((ti as u64) << 32) ^ i as u64,
                );
                estimate_j1_minus_j2(gmm, proc, t, f.as_ref(), num_samples, &mut rng)
            })
            .collect::<Result<_>>()?;
        for i in 0..estimates.len() {
            for j in (i + 1)..estimates.len() {
                let (a, sa) = estimates[i];
                let (b, sb) = estimates[j];
                let combined = (sa * sa + sb * sb).sqrt();
                worst_z = worst_z.max((a - b).abs() / combined);
            }
        }
    }
    Ok(CheckReport {
        name: "score-identity".into(),
        passed: worst_z <= 4.0,
        detail: format!("max pairwise |difference| = {worst_z:.2} combined standard errors (bound 4)"),
    })
}

/// Bit-exact agreement of the momentum step (normalized mode) with the
/// independent VE predictor when the operator is the identity.
pub fn ve_reduction_suite(trials: usize, seed: u64) -> Result<CheckReport> {
    use crate::operators::{OperatorFamily, Schedule};
    use crate::sampler::{momentum_step, FnDenoiser, NoiseEstimate, SamplerConfig};
    use rand::SeedableRng;

    let schedule = Schedule::three_point("ve", 0.0, 0.0, 1e-3, 0.1, 0.2)?;
    let proc = CorruptionProcess::new(OperatorFamily::Identity { dim: 3 }, schedule)?;
    let denoiser = FnDenoiser(|x: &Tensor, t: f64| {
        // Any smooth nonlinear map works; the reduction must hold bitwise
        // regardless of the denoiser.
        Tensor::from_vec(
            x.data()
                .iter()
                .map(|v| 0.8 * v + 0.1 * (v * 3.0 + t).sin())
                .collect(),
        )
    });
    let cfg = SamplerConfig::new(16, NoiseEstimate::Normalized, 0)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for trial in 0..trials {
        let x = Tensor::from_vec((0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect());
        // A random reverse step strictly inside the noise ramp so sigma
        // actually changes.
        let t = 0.02 + 0.18 * rng.random::<f64>();
        let dt = t * rng.random::<f64>().max(0.05);
        let step_seed = seed ^ (trial as u64) << 8;
        let mut rng_a = rand_chacha::ChaCha8Rng::seed_from_u64(step_seed);
        let mut rng_b = rand_chacha::ChaCha8Rng::seed_from_u64(step_seed);
        let a = momentum_step(&x, t, dt, &denoiser, &proc, &mut rng_a, &cfg)?;
        let b = ve_predictor_step_reference(&x, t, dt, &denoiser, &proc, &mut rng_b)?;
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    Ok(CheckReport {
        name: "ve-reduction".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches}/{trials} states differed bitwise"),
    })
}

/// Momentum sampler with the exact posterior-mean denoiser on the 2-D
/// Gaussian benchmark: the sampled distribution must land within `w2_bound`
/// of the data distribution (both by exact chain moments and by sampling).
pub fn oracle_sampler_suite(
    num_samples: usize,
    num_steps: usize,
    w2_bound: f64,
    seed: u64,
) -> Result<CheckReport> {
    use crate::datasets::fade_gaussian_2d;
    use crate::sampler::{sample_batch, NoiseEstimate, OracleDenoiser, SamplerConfig};

    let (gmm, proc) = fade_gaussian_2d()?;
    let p1 = TerminalDistribution {
        mean: Tensor::from_vec(
            DenseOperator::from_operator(&proc.operator_at(1.0)?)?
                .matrix()
                .mul_vec(&gmm.mean()),
        ),
        sigma: proc.sigma_at(1.0)?,
    };

    let (m_exact, s_exact) =
        gaussian_chain_moments(SamplerKind::Momentum, &gmm, &proc, &p1, num_steps)?;
    let w2_exact = gaussian_w2_2d(&m_exact, &s_exact, &gmm.mean(), &gmm.covariance());

    let denoiser = OracleDenoiser::for_grid(gmm.clone(), proc.clone(), num_steps)?;
    let cfg = SamplerConfig::new(num_steps, NoiseEstimate::Normalized, seed)?;
    let samples = sample_batch(&denoiser, &proc, &cfg, &p1, num_samples, SamplerKind::Momentum)?;
    let (m_emp, s_emp) = empirical_moments_2d(&samples);
    let w2_sampled = gaussian_w2_2d(&m_emp, &s_emp, &gmm.mean(), &gmm.covariance());

    let mean_err: f64 = m_emp
        .iter()
        .zip(&gmm.mean())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mean_bound = 0.05 * gmm.mean().iter().map(|v| v * v).sum::<f64>().sqrt() + 0.05;

    let passed = w2_exact <= w2_bound && w2_sampled <= w2_bound && mean_err <= mean_bound;
    Ok(CheckReport {
        name: "oracle-sampler".into(),
        passed,
        detail: format!(
            "W2 exact {w2_exact:.4}, sampled {w2_sampled:.4} (bound {w2_bound}); mean error {mean_err:.4} (bound {mean_bound:.4})"
        ),
    })
}
