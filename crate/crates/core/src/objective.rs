//! Training objectives for linear corruption processes.
//!
//! The network phi predicts the residual to the clean image, `r_t = x_0 - x_t`,
//! and the loss measures the error in the filtered space:
//!
//! ```text
//! L = E_t w(t) E_{x0, x_t} || C_t (phi(x_t|t) - r_t) ||^2
//! ```
//!
//! With `C_t = I` this is the usual denoising-score-matching residual loss.
//! The implied score is `s(x_t|t) = (C_t h(x_t|t) - x_t) / sigma_t^2` with
//! `h = phi + x_t`; [`score_from_model`] exposes that view, and [`dsm_loss`]
//! provides the plain DSM objective for ablations.
//!
//! Weighting: the raw per-level objective carries a `1/sigma_t^4` factor.
//! [`Weighting::Sigma4`] (default) multiplies by `sigma_t^4`, cancelling it,
//! so a sample contributes exactly `||C_t (phi - r_t)||^2`; this is the
//! numerically stable choice at small sigma. [`Weighting::Uniform`] keeps the
//! factor as written.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{optimizer_step, AdamConfig, BackpropSession, OptimizerState, ScoreModel};
use crate::operators::{CorruptionProcess, LinearOperator, SIGMA_FLOOR};
use crate::sampler::Denoiser;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// w(t) = sigma_t^4: per-sample contribution is the plain filtered MSE.
    Sigma4,
    /// w(t) = 1: keeps the 1/sigma_t^4 factor.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weighting: Weighting,
    /// Smallest trainable t; sampled t values are clamped to `[t_min, 1]`.
    pub t_min: f64,
}

impl LossConfig {
    pub fn new(weighting: Weighting, t_min: f64) -> Result<Self> {
        if t_min <= 0.0 {
            return Err(Error::InvalidArgument {
                reason: format!("t_min must be positive, got {t_min}"),
            });
        }
        Ok(LossConfig { weighting, t_min })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weighting: Weighting::Sigma4,
            t_min: 1e-3,
        }
    }
}

/// A minibatch of perturbed samples with everything needed for the loss.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Vec<Tensor>,
    pub t: Vec<f64>,
    pub x_t: Vec<Tensor>,
    /// The standard-normal draw z with x_t = C_t x0 + sigma_t z.
    pub noise: Vec<Tensor>,
}

impl TrainBatch {
    /// Draw a batch: x0 uniformly from the dataset (with replacement),
    /// t ~ U[0, 1] clamped to [t_min, 1], x_t from the perturbation kernel.
    pub fn sample<R: Rng + ?Sized>(
        data: &[Tensor],
        proc: &CorruptionProcess,
        batch_size: usize,
        t_min: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument {
                reason: "dataset must be non-empty".into(),
            });
        }
        let mut x0 = Vec::with_capacity(batch_size);
        let mut t = Vec::with_capacity(batch_size);
        let mut x_t = Vec::with_capacity(batch_size);
        let mut noise = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let idx = rng.random_range(0..data.len());
            let ti = rng.random::<f64>().clamp(t_min, 1.0);
            let (xti, zi) = proc.perturb_with_noise(&data[idx], ti, rng)?;
            x0.push(data[idx].clone());
            t.push(ti);
            x_t.push(xti);
            noise.push(zi);
        }
        Ok(TrainBatch { x0, t, x_t, noise })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// `||C (phi - (x0 - x_t))||^2` for one sample.
pub fn filtered_residual_sq(
    op: &LinearOperator,
    phi: &Tensor,
    x0: &Tensor,
    x_t: &Tensor,
) -> Result<f64> {
    let r = x0.sub(x_t);
    let filtered = op.apply(&phi.sub(&r))?;
    Ok(filtered.norm_sq())
}

/// The multiplier applied to the filtered residual, per weighting policy.
pub fn weight_factor(weighting: Weighting, sigma: f64) -> f64 {
    match weighting {
        Weighting::Sigma4 => 1.0,
        Weighting::Uniform => 1.0 / sigma.powi(4),
    }
}

/// The score implied by a residual predictor:
/// `s(x_t|t) = (C_t h(x_t|t) - x_t) / sigma_t^2` with `h = phi + x_t`.
pub fn score_from_model(
    denoiser: &dyn Denoiser,
    x_t: &Tensor,
    t: f64,
    proc: &CorruptionProcess,
) -> Result<Tensor> {
    let sigma = proc.sigma_at(t)?;
    if sigma < SIGMA_FLOOR {
        return Err(Error::SigmaBelowFloor {
            t,
            sigma,
            floor: SIGMA_FLOOR,
        });
    }
    let h = denoiser.predict_clean(x_t, t)?;
    let ch = proc.operator_at(t)?.apply(&h)?;
    Ok(ch.sub(x_t).scale(1.0 / (sigma * sigma)))
}

/// Mean filtered-residual loss over a batch.
pub fn ssm_loss(
    denoiser: &dyn Denoiser,
    batch: &TrainBatch,
    proc: &CorruptionProcess,
    cfg: &LossConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument {
            reason: "batch must be non-empty".into(),
        });
    }
    let mut total = 0.0;
    for i in 0..batch.len() {
        let t = batch.t[i];
        let op = proc.operator_at(t)?;
        let sigma = proc.sigma_at(t)?;
        let phi = denoiser.residual(&batch.x_t[i], t)?;
        total += weight_factor(cfg.weighting, sigma)
            * filtered_residual_sq(&op, &phi, &batch.x0[i], &batch.x_t[i])?;
    }
    Ok(total / batch.len() as f64)
}

/// Plain DSM baseline: mean `||s(x_t|t) - (C_t x0 - x_t)/sigma_t^2||^2` for a
/// raw score network.
pub fn dsm_loss<F>(score: F, batch: &TrainBatch, proc: &CorruptionProcess) -> Result<f64>
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    if batch.is_empty() {
        return Err(Error::InvalidArgument {
            reason: "batch must be non-empty".into(),
        });
    }
    let mut total = 0.0;
    for i in 0..batch.len() {
        let t = batch.t[i];
        let sigma = proc.sigma_at(t)?;
        if sigma < SIGMA_FLOOR {
            return Err(Error::SigmaBelowFloor {
                t,
                sigma,
                floor: SIGMA_FLOOR,
            });
        }
        let s = score(&batch.x_t[i], t)?;
        let target = proc
            .operator_at(t)?
            .apply(&batch.x0[i])?
            .sub(&batch.x_t[i])
            .scale(1.0 / (sigma * sigma));
        total += s.sub(&target).norm_sq();
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    /// Linearly decay the rate to zero after warmup; lowers the
    /// gradient-noise floor for evaluation-grade runs.
    pub linear_decay: bool,
    pub clip_norm: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            batch_size: 128,
            lr: 2e-4,
            warmup_steps: 500,
            linear_decay: false,
            clip_norm: 1.0,
        }
    }
}

/// One row of the training trace, emitted as CSV `step,loss,t_mean`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub t_mean: f64,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,loss,t_mean\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.t_mean));
    }
    out
}

/// Minibatch training of the residual network on the filtered loss.
/// Aborts with the step index if the loss turns non-finite.
pub fn train<R: Rng + ?Sized>(
    model: &mut ScoreModel,
    data: &[Tensor],
    proc: &CorruptionProcess,
    loss_cfg: &LossConfig,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<Vec<TraceRow>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument {
            reason: "dataset must be non-empty".into(),
        });
    }
    let mut state = OptimizerState::new(model.param_count());
    let mut trace = Vec::with_capacity(settings.steps);
    let mut grads = vec![0.0; model.param_count()];
    let mut session = BackpropSession::new();
    for step in 0..settings.steps {
        let batch = TrainBatch::sample(data, proc, settings.batch_size, loss_cfg.t_min, rng)?;
        grads.fill(0.0);
        let mut loss = 0.0;
        let inv_b = 1.0 / batch.len() as f64;
        for i in 0..batch.len() {
            let t = batch.t[i];
            let op = proc.operator_at(t)?;
            let w = weight_factor(loss_cfg.weighting, proc.sigma_at(t)?);
            let phi = session.forward(model, &batch.x_t[i], t)?;
            let r = batch.x0[i].sub(&batch.x_t[i]);
            let diff = phi.sub(&r);
            let filtered = op.apply(&diff)?;
            loss += w * filtered.norm_sq() * inv_b;
            // d/dphi of w ||C (phi - r)||^2 / B = (2 w / B) C^T C (phi - r).
            let upstream = op.apply_transpose(&filtered)?.scale(2.0 * w * inv_b);
            session.backward(model, upstream.data(), &mut grads)?;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let t_mean = batch.t.iter().sum::<f64>() / batch.len() as f64;
        trace.push(TraceRow { step, loss, t_mean });

        let warm = if settings.warmup_steps > 0 {
            ((step + 1) as f64 / settings.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let decay = if settings.linear_decay && settings.steps > settings.warmup_steps {
            let after = step.saturating_sub(settings.warmup_steps) as f64;
            let span = (settings.steps - settings.warmup_steps) as f64;
            1.0 - after / span
        } else {
            1.0
        };
        let adam = AdamConfig {
            lr: settings.lr * warm * decay,
            clip_norm: Some(settings.clip_norm),
            ..AdamConfig::default()
        };
        optimizer_step(model, &grads, &mut state, &adam)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::operators::{OperatorFamily, Schedule, ScheduleEntry};
    use crate::oracle::{posterior_mean, DenseOperator, GaussianMixture};
    use crate::sampler::FnDenoiser;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_process(dim: usize) -> CorruptionProcess {
        let schedule = Schedule::three_point("id", 0.0, 0.0, 1e-3, 0.1, 0.2).unwrap();
        CorruptionProcess::new(OperatorFamily::Identity { dim }, schedule).unwrap()
    }

    fn fade_process(dim: usize) -> CorruptionProcess {
        let schedule = Schedule::three_point("fade", 0.0, 0.9, 1e-3, 0.1, 0.2).unwrap();
        CorruptionProcess::new(OperatorFamily::DiagonalFade { dim }, schedule).unwrap()
    }

    fn random_batch(proc: &CorruptionProcess, dim: usize, size: usize, seed: u64) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Tensor> = (0..8)
            .map(|_| Tensor::from_vec((0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()))
            .collect();
        TrainBatch::sample(&data, proc, size, 1e-3, &mut rng).unwrap()
    }

    #[test]
    fn score_equals_conditional_score_for_perfect_residual() {
        // phi = x0 - x_t with C = I gives s = (x0 - x_t)/sigma^2.
        let proc = identity_process(2);
        let x0 = Tensor::from_vec(vec![0.8, -0.3]);
        let x_t = Tensor::from_vec(vec![0.5, 0.1]);
        let t = 0.6;
        let x0c = x0.clone();
        let den = FnDenoiser(move |x: &Tensor, _| x0c.sub(x).add(x));
        let s = score_from_model(&den, &x_t, t, &proc).unwrap();
        let sigma = proc.sigma_at(t).unwrap();
        let expected = x0.sub(&x_t).scale(1.0 / (sigma * sigma));
        for (a, b) in s.data().iter().zip(expected.data()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_residual_gives_zero_score_with_identity_operator() {
        let proc = identity_process(3);
        let den = FnDenoiser(|x: &Tensor, _| x.clone()); // phi == 0 -> h = x_t
        let x_t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let s = score_from_model(&den, &x_t, 0.5, &proc).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn score_below_sigma_floor_is_an_error() {
        let schedule = Schedule::new(
            "tiny",
            "manual",
            0.0,
            vec![
                ScheduleEntry { t: 0.0, blur_std: 0.0, sigma: 1e-6 },
                ScheduleEntry { t: 1.0, blur_std: 0.0, sigma: 1e-6 },
            ],
        )
        .unwrap();
        let proc = CorruptionProcess::new(OperatorFamily::Identity { dim: 2 }, schedule).unwrap();
        let den = FnDenoiser(|x: &Tensor, _| x.clone());
        let err = score_from_model(&den, &Tensor::from_vec(vec![0.0, 0.0]), 0.5, &proc).unwrap_err();
        assert!(matches!(err, Error::SigmaBelowFloor { .. }));
    }

    #[test]
    fn hand_computed_filtered_residual() {
        // x0 = (1, 0), x_t = (0, 0), C = diag(1, 0), phi = (0.5, 7):
        // C(phi - r) = (-0.5, 0), squared norm 0.25.
        let op = LinearOperator::diagonal_fade(vec![1.0, 0.0]).unwrap();
        let phi = Tensor::from_vec(vec![0.5, 7.0]);
        let x0 = Tensor::from_vec(vec![1.0, 0.0]);
        let x_t = Tensor::from_vec(vec![0.0, 0.0]);
        let term = filtered_residual_sq(&op, &phi, &x0, &x_t).unwrap();
        assert_relative_eq!(term, 0.25, max_relative = 1e-15);
    }

    #[test]
    fn perfect_prediction_gives_zero_loss() {
        let proc = fade_process(2);
        let batch = random_batch(&proc, 2, 16, 3);
        // phi(x_t) = r_t requires knowing x0; emulate by zip-indexing: use a
        // denoiser that looks the sample up by pointer equality is overkill;
        // instead check the loss formula directly sample by sample.
        for i in 0..batch.len() {
            let r = batch.x0[i].sub(&batch.x_t[i]);
            let op = proc.operator_at(batch.t[i]).unwrap();
            let term = filtered_residual_sq(&op, &r, &batch.x0[i], &batch.x_t[i]).unwrap();
            assert!(term <= 1e-24);
        }
    }

    #[test]
    fn sigma4_weighting_contribution_is_exactly_the_filtered_mse() {
        let proc = fade_process(2);
        let batch = random_batch(&proc, 2, 8, 4);
        let den = FnDenoiser(|x: &Tensor, _| x.scale(0.3));
        let loss = ssm_loss(&den, &batch, &proc, &LossConfig::default()).unwrap();
        let mut expected = 0.0;
        for i in 0..batch.len() {
            let op = proc.operator_at(batch.t[i]).unwrap();
            let phi = den.residual(&batch.x_t[i], batch.t[i]).unwrap();
            // Sigma4 policy: the weight is exactly 1.
            assert_eq!(weight_factor(Weighting::Sigma4, proc.sigma_at(batch.t[i]).unwrap()), 1.0);
            expected += filtered_residual_sq(&op, &phi, &batch.x0[i], &batch.x_t[i]).unwrap();
        }
        assert_relative_eq!(loss, expected / batch.len() as f64, max_relative = 1e-14);
    }

    #[test]
    fn identity_operator_uniform_weighting_equals_dsm_loss() {
        // Algebraic identity: ||C(phi - r)||^2 / sigma^4 with C = I equals
        // ||s_theta - conditional score||^2 under the score reparametrization.
        let proc = identity_process(2);
        let batch = random_batch(&proc, 2, 32, 5);
        let den = FnDenoiser(|x: &Tensor, t| x.scale(0.2 * t).add(&Tensor::from_vec(vec![0.05, -0.1])));
        let cfg = LossConfig::new(Weighting::Uniform, 1e-3).unwrap();
        let ssm = ssm_loss(&den, &batch, &proc, &cfg).unwrap();
        let dsm = dsm_loss(
            |x_t, t| score_from_model(&den, x_t, t, &proc),
            &batch,
            &proc,
        )
        .unwrap();
        assert_relative_eq!(ssm, dsm, max_relative = 1e-12);
    }

    #[test]
    fn dsm_loss_of_exact_conditional_score_is_zero() {
        let proc = fade_process(2);
        let batch = random_batch(&proc, 2, 16, 6);
        // The conditional score is -z/sigma; reconstruct it from the batch by
        // index (closures can't see the index, so evaluate directly).
        let mut total = 0.0;
        for i in 0..batch.len() {
            let sigma = proc.sigma_at(batch.t[i]).unwrap();
            let s = batch.noise[i].scale(-1.0 / sigma);
            let target = proc
                .operator_at(batch.t[i])
                .unwrap()
                .apply(&batch.x0[i])
                .unwrap()
                .sub(&batch.x_t[i])
                .scale(1.0 / (sigma * sigma));
            total += s.sub(&target).norm_sq();
        }
        assert!(total / batch.len() as f64 <= 1e-20);
    }

    #[test]
    fn dsm_loss_of_zero_network_is_mean_scaled_target_norm() {
        let proc = fade_process(2);
        let batch = random_batch(&proc, 2, 16, 7);
        let loss = dsm_loss(
            |x: &Tensor, _| Ok(Tensor::zeros(vec![x.len()])),
            &batch,
            &proc,
        )
        .unwrap();
        let mut expected = 0.0;
        for i in 0..batch.len() {
            let sigma = proc.sigma_at(batch.t[i]).unwrap();
            let cx0 = proc.operator_at(batch.t[i]).unwrap().apply(&batch.x0[i]).unwrap();
            expected += cx0.sub(&batch.x_t[i]).norm_sq() / sigma.powi(4);
        }
        assert_relative_eq!(loss, expected / batch.len() as f64, max_relative = 1e-12);
    }

    #[test]
    fn loss_config_requires_positive_t_min() {
        assert!(LossConfig::new(Weighting::Sigma4, 0.0).is_err());
        assert!(LossConfig::new(Weighting::Sigma4, -1.0).is_err());
    }

    #[test]
    fn training_zero_steps_leaves_model_bytes_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = ScoreModel::new(ModelConfig::with_dim(2), &mut rng);
        let mut before = Vec::new();
        model.save_to(&mut before, 0).unwrap();
        let data = vec![Tensor::from_vec(vec![0.1, 0.2])];
        let proc = fade_process(2);
        let settings = TrainSettings { steps: 0, ..TrainSettings::default() };
        train(&mut model, &data, &proc, &LossConfig::default(), &settings, &mut rng).unwrap();
        let mut after = Vec::new();
        model.save_to(&mut after, 0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn training_diverges_with_absurd_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = ScoreModel::new(
            ModelConfig {
                hidden_width: 8,
                hidden_layers: 1,
                ..ModelConfig::with_dim(2)
            },
            &mut rng,
        );
        let data = vec![Tensor::from_vec(vec![5.0, -3.0])];
        let proc = fade_process(2);
        let settings = TrainSettings {
            steps: 10,
            batch_size: 4,
            lr: 1e200,
            warmup_steps: 0,
            linear_decay: false,
            clip_norm: 1.0,
        };
        let err = train(&mut model, &data, &proc, &LossConfig::default(), &settings, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn training_trace_is_reproducible_and_csv_formatted() {
        let proc = fade_process(2);
        let data = vec![
            Tensor::from_vec(vec![0.5, -0.5]),
            Tensor::from_vec(vec![-0.25, 1.0]),
        ];
        let cfg = ModelConfig {
            hidden_width: 8,
            hidden_layers: 1,
            time_frequencies: 4,
            ..ModelConfig::with_dim(2)
        };
        let settings = TrainSettings {
            steps: 5,
            batch_size: 4,
            ..TrainSettings::default()
        };
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = ScoreModel::new(cfg, &mut rng);
            train(&mut model, &data, &proc, &LossConfig::default(), &settings, &mut rng).unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a, b);
        let csv = trace_to_csv(&a);
        assert!(csv.starts_with("step,loss,t_mean\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn training_on_single_point_dataset_learns_the_point() {
        // Dataset {a}: phi(x_t|t) should converge to a - x_t, i.e. h ~ a.
        let a = Tensor::from_vec(vec![0.6, -0.4]);
        let proc = fade_process(2);
        let cfg = ModelConfig {
            hidden_width: 32,
            hidden_layers: 2,
            time_frequencies: 8,
            ..ModelConfig::with_dim(2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = ScoreModel::new(cfg, &mut rng);
        let settings = TrainSettings {
            steps: 1200,
            batch_size: 32,
            lr: 2e-3,
            warmup_steps: 100,
            linear_decay: false,
            clip_norm: 1.0,
        };
        train(
            &mut model,
            &[a.clone()],
            &proc,
            &LossConfig::default(),
            &settings,
            &mut rng,
        )
        .unwrap();

        let t = 0.5;
        let mut mse = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let x_t = proc.sample_perturbation(&a, t, &mut rng).unwrap();
            let h = model.forward(&x_t, t).unwrap().add(&x_t);
            mse += h.sub(&a).norm_sq();
        }
        mse /= trials as f64;
        assert!(mse <= 1e-2, "mse {mse}");
    }

    #[test]
    fn trained_denoiser_approaches_posterior_mean_on_gaussian_data() {
        // 2-D Gaussian q0 under fade + noise: h should approach E[x0 | x_t],
        // with mean squared deviation <= 5e-2 * trace(Sigma).
        let cov = crate::linalg::Mat::from_rows(vec![vec![0.25, 0.05], vec![0.05, 0.16]]).unwrap();
        let trace_sigma = 0.25 + 0.16;
        let gmm = GaussianMixture::single(vec![0.5, -0.2], cov).unwrap();
        let proc = fade_process(2);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let data = gmm.sample_many(4096, &mut rng);

        let cfg = ModelConfig {
            hidden_width: 64,
            hidden_layers: 2,
            time_frequencies: 8,
            ..ModelConfig::with_dim(2)
        };
        let mut model = ScoreModel::new(cfg, &mut rng);
        let settings = TrainSettings {
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 200,
            linear_decay: true,
            clip_norm: 1.0,
        };
        train(&mut model, &data, &proc, &LossConfig::default(), &settings, &mut rng).unwrap();

        let t = 0.5;
        let c = DenseOperator::from_operator(&proc.operator_at(t).unwrap()).unwrap();
        let sigma = proc.sigma_at(t).unwrap();
        let mut mse = 0.0;
        let trials = 500;
        for _ in 0..trials {
            let x0 = gmm.sample(&mut rng);
            let x_t = proc.sample_perturbation(&x0, t, &mut rng).unwrap();
            let h = model.forward(&x_t, t).unwrap().add(&x_t);
            let target = posterior_mean(&gmm, &c, sigma, &x_t).unwrap();
            mse += h.sub(&target).norm_sq();
        }
        mse /= trials as f64;
        assert!(
            mse <= 5e-2 * trace_sigma,
            "mse {mse} vs bound {}",
            5e-2 * trace_sigma
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn ssm_loss_is_non_negative(seed in 0u64..500, scale in -2.0f64..2.0) {
                let proc = fade_process(2);
                let batch = random_batch(&proc, 2, 8, seed);
                let den = FnDenoiser(move |x: &Tensor, _| x.scale(scale));
                let loss = ssm_loss(&den, &batch, &proc, &LossConfig::default()).unwrap();
                prop_assert!(loss >= 0.0);
            }
        }
    }
}
