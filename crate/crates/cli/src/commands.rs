//! The six experiment commands. Every command is deterministic given
//! (config, seed): all randomness flows through seeded ChaCha streams and a
//! per-purpose stream constant, and artifacts never embed wall-clock data
//! (timings go to stdout only).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lindiff::error::{Error, Result};
use lindiff::model::{ModelConfig, ScoreModel};
use lindiff::objective::{score_from_model, trace_to_csv, train, LossConfig, TrainSettings};
use lindiff::operators::CorruptionProcess;
use lindiff::oracle::{analytic_score, pushforward, DenseOperator};
use lindiff::sampler::{
    sample_batch, Denoiser, ModelDenoiser, OracleDenoiser, SamplerConfig, TerminalDistribution,
};
use lindiff::scheduler::{
    calibrate_epsilon, distance_matrix, empirical_distance, mse_matched_schedule,
    schedule_from_path, CandidateGrid,
};
use lindiff::tensor::Tensor;
use lindiff::verify::{
    gradient_check_suite, oracle_sampler_suite, score_identity_suite, ve_reduction_suite,
    CheckReport,
};

use crate::config::{ExperimentConfig, ScheduleSource};

// Per-purpose seed streams.
const STREAM_SCHEDULE: u64 = 0x5348_4544; // "SHED"
const STREAM_TRAIN: u64 = 0x5452_4149; // "TRAI"
const STREAM_SAMPLE: u64 = 0x5341_4D50; // "SAMP"
const STREAM_EVAL: u64 = 0x4556_414C; // "EVAL"

fn hash_hex(config: &ExperimentConfig) -> String {
    format!("{:016x}", config.hash())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ScheduleMeta {
    config_hash: String,
    seed: u64,
    source: String,
    epsilon: f64,
    achieved_len: Option<usize>,
    exact: Option<bool>,
    clamped: Vec<f64>,
}

pub fn cmd_schedule(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let family = config.operator_family()?;
    let (train_data, _) = config.build_datasets()?;
    let c = &config.corruption;
    let s = &config.schedule;

    let (schedule, meta) = match s.source {
        ScheduleSource::Auto => {
            let thetas: Vec<f64> = (0..s.num_candidates)
                .map(|i| {
                    c.theta_min
                        + (c.theta_max - c.theta_min) * i as f64 / (s.num_candidates - 1) as f64
                })
                .collect();
            let base: Vec<Tensor> = train_data
                .iter()
                .cycle()
                .take(s.cloud_size)
                .cloned()
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_SCHEDULE);
            let grid = CandidateGrid::build(&family, thetas, &base, c.sigma_min, c.sigma_max, &mut rng)?;
            let dists = distance_matrix(&grid, s.num_projections, config.seed ^ STREAM_SCHEDULE);
            let mut csv = String::new();
            for row in &dists {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            std::fs::write(out.join("distances.csv"), csv)?;
            let cal = calibrate_epsilon(&dists, s.target_path_len.min(s.num_candidates))?;
            let schedule = schedule_from_path(
                &grid,
                &cal.path.nodes,
                c.sigma_min,
                c.sigma_max,
                &config.dataset_tag(),
                "sliced-w2",
                cal.epsilon,
            )?;
            let meta = ScheduleMeta {
                config_hash: hash_hex(config),
                seed: config.seed,
                source: "auto".into(),
                epsilon: cal.epsilon,
                achieved_len: Some(cal.achieved_len),
                exact: Some(cal.exact),
                clamped: vec![],
            };
            (schedule, meta)
        }
        ScheduleSource::MseMatched => {
            let reference: Vec<(f64, f64)> = (0..s.reference_points)
                .map(|i| {
                    let t = i as f64 / (s.reference_points - 1) as f64;
                    (
                        t,
                        s.reference_sigma_min
                            * (s.reference_sigma_max / s.reference_sigma_min).powf(t),
                    )
                })
                .collect();
            let result = mse_matched_schedule(
                &reference,
                &train_data,
                &family,
                c.theta_min,
                c.theta_max,
                c.sigma_min,
                c.sigma_max,
                &config.dataset_tag(),
            )?;
            let meta = ScheduleMeta {
                config_hash: hash_hex(config),
                seed: config.seed,
                source: "mse-matched".into(),
                epsilon: 0.0,
                achieved_len: None,
                exact: None,
                clamped: result.clamped.clone(),
            };
            (result.schedule, meta)
        }
        ScheduleSource::File => {
            let path = s.file.as_ref().expect("validated");
            let schedule = lindiff::operators::Schedule::load(Path::new(path))?;
            let meta = ScheduleMeta {
                config_hash: hash_hex(config),
                seed: config.seed,
                source: "file".into(),
                epsilon: schedule.epsilon,
                achieved_len: None,
                exact: None,
                clamped: vec![],
            };
            (schedule, meta)
        }
    };

    let path = out.join("schedule.json");
    schedule.save(&path)?;
    write_json(&out.join("schedule.meta.json"), &meta)?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainMeta {
    config_hash: String,
    seed: u64,
    steps: usize,
    final_loss: Option<f64>,
}

pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let (train_data, _) = config.build_datasets()?;
    let proc = config.build_process()?;
    let dim = config.data_dim()?;
    let m = &config.model;
    let model_cfg = ModelConfig {
        input_dim: dim,
        hidden_width: m.hidden_width,
        hidden_layers: m.hidden_layers,
        time_frequencies: m.time_frequencies,
        ..ModelConfig::with_dim(dim)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_TRAIN);
    let mut model = ScoreModel::new(model_cfg, &mut rng);
    let t = &config.train;
    let settings = TrainSettings {
        steps: t.steps,
        batch_size: t.batch_size,
        lr: t.lr,
        warmup_steps: t.warmup_steps,
        linear_decay: t.linear_decay,
        clip_norm: t.clip_norm,
    };
    let loss_cfg = LossConfig::new(t.weighting, t.t_min)?;
    let trace = train(&mut model, &train_data, &proc, &loss_cfg, &settings, &mut rng)?;

    let ckpt = out.join("model.ckpt");
    model.save(&ckpt, config.hash())?;
    std::fs::write(out.join("trace.csv"), trace_to_csv(&trace))?;
    write_json(
        &out.join("train.meta.json"),
        &TrainMeta {
            config_hash: hash_hex(config),
            seed: config.seed,
            steps: t.steps,
            final_loss: trace.last().map(|r| r.loss),
        },
    )?;
    Ok(ckpt)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    config_hash: String,
    seed: u64,
    num_steps: usize,
    mode: String,
    kind: String,
    denoiser: String,
    num_samples: usize,
    nfe_per_sample: usize,
}

/// Build the denoiser: the checkpoint when given, otherwise the exact
/// posterior mean (which needs a Gaussian-mixture dataset).
fn build_denoiser(
    config: &ExperimentConfig,
    proc: &CorruptionProcess,
    checkpoint: Option<&Path>,
    num_steps: usize,
) -> Result<(Box<dyn Denoiser>, &'static str)> {
    match checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(Error::InvalidArgument {
                    reason: format!("checkpoint {} does not exist", path.display()),
                });
            }
            let (model, _hash) = ScoreModel::load(path)?;
            let dim = config.data_dim()?;
            if model.config().input_dim != dim {
                return Err(Error::CheckpointMismatch {
                    reason: format!(
                        "checkpoint is for dimension {}, dataset has {}",
                        model.config().input_dim,
                        dim
                    ),
                });
            }
            Ok((Box::new(OwnedModelDenoiser { model }), "model"))
        }
        None => {
            let gmm = config.gmm()?.ok_or_else(|| Error::InvalidArgument {
                reason: "sampling without --checkpoint needs a Gaussian-mixture dataset (exact denoiser)"
                    .into(),
            })?;
            let den = OracleDenoiser::for_grid(gmm, proc.clone(), num_steps)?;
            Ok((Box::new(den), "oracle"))
        }
    }
}

/// Denoiser that owns its model (checkpoint loads).
struct OwnedModelDenoiser {
    model: ScoreModel,
}

impl Denoiser for OwnedModelDenoiser {
    fn predict_clean(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        ModelDenoiser { model: &self.model }.predict_clean(x_t, t)
    }

    fn residual(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self.model.forward(x_t, t)
    }
}

fn stack_samples(samples: &[Tensor]) -> Result<Tensor> {
    let n = samples[0].len();
    let mut data = Vec::with_capacity(samples.len() * n);
    for s in samples {
        data.extend_from_slice(s.data());
    }
    Tensor::new(vec![samples.len(), n], data)
}

pub fn cmd_sample(
    config: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<PathBuf> {
    let (train_data, _) = config.build_datasets()?;
    let proc = config.build_process()?;
    let sp = &config.sampler;
    let (denoiser, denoiser_tag) = build_denoiser(config, &proc, checkpoint, sp.num_steps)?;
    let p1 = TerminalDistribution::from_dataset(&proc, &train_data)?;
    let cfg = SamplerConfig::new(sp.num_steps, sp.mode, config.seed ^ STREAM_SAMPLE)?;
    let samples = sample_batch(denoiser.as_ref(), &proc, &cfg, &p1, sp.num_samples, sp.kind)?;

    let path = out.join("samples.sdt");
    stack_samples(&samples)?.save(&path)?;
    write_json(
        &out.join("samples.meta.json"),
        &SampleMeta {
            config_hash: hash_hex(config),
            seed: config.seed,
            num_steps: sp.num_steps,
            mode: format!("{:?}", sp.mode).to_lowercase(),
            kind: format!("{:?}", sp.kind).to_lowercase(),
            denoiser: denoiser_tag.into(),
            num_samples: sp.num_samples,
            nfe_per_sample: sp.num_steps,
        },
    )?;
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub sliced_w2: f64,
    /// Per-t mean squared score error vs the oracle; present only for
    /// Gaussian-mixture data with a checkpoint to evaluate.
    pub per_t_score_mse: Option<Vec<(f64, f64)>>,
    pub nfe_per_sample: usize,
    pub num_samples: usize,
    /// Measured but excluded from the artifact (kept byte-reproducible);
    /// printed to stdout instead.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

fn unstack_samples(stacked: &Tensor) -> Result<Vec<Tensor>> {
    let shape = stacked.shape();
    if shape.len() != 2 {
        return Err(Error::MalformedFile {
            what: "sample batch",
            reason: format!("expected rank 2, got {:?}", shape),
        });
    }
    let (count, n) = (shape[0], shape[1]);
    Ok((0..count)
        .map(|i| {
            Tensor::new(vec![n], stacked.data()[i * n..(i + 1) * n].to_vec()).expect("finite")
        })
        .collect())
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<EvalReport> {
    let started = Instant::now();
    let meta_path = out.join("samples.meta.json");
    let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
    if meta.config_hash != hash_hex(config) {
        return Err(Error::InvalidArgument {
            reason: format!(
                "samples were produced by config {} but this config hashes to {}",
                meta.config_hash,
                hash_hex(config)
            ),
        });
    }
    let samples = unstack_samples(&Tensor::load(&out.join("samples.sdt"))?)?;
    let (_, holdout) = config.build_datasets()?;
    let holdout_flat: Vec<Tensor> = holdout
        .iter()
        .map(|x| x.clone().reshape(vec![x.len()]).expect("same length"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_EVAL);
    let sliced_w2 = empirical_distance(
        &samples,
        &holdout_flat,
        config.schedule.num_projections,
        &mut rng,
    )?;

    let per_t_score_mse = match (config.gmm()?, checkpoint) {
        (Some(gmm), Some(ckpt)) => {
            let proc = config.build_process()?;
            let (model, _) = ScoreModel::load(ckpt)?;
            let den = ModelDenoiser { model: &model };
            let mut rows = Vec::new();
            for &t in &[0.3, 0.6, 0.9] {
                let c = DenseOperator::from_operator(&proc.operator_at(t)?)?;
                let sigma = proc.sigma_at(t)?;
                let marginal = pushforward(&gmm, &c, sigma)?;
                let mut mse = 0.0;
                let trials = 256;
                for _ in 0..trials {
                    let x0 = gmm.sample(&mut rng);
                    let x_t = proc.sample_perturbation(&x0, t, &mut rng)?;
                    let s_hat = score_from_model(&den, &x_t, t, &proc)?;
                    let s_true = analytic_score(&marginal, &x_t)?;
                    mse += s_hat.sub(&s_true).norm_sq();
                }
                rows.push((t, mse / trials as f64));
            }
            Some(rows)
        }
        _ => None,
    };

    let report = EvalReport {
        config_hash: hash_hex(config),
        sliced_w2,
        per_t_score_mse,
        nfe_per_sample: meta.nfe_per_sample,
        num_samples: samples.len(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct VerifyArtifact {
    config_hash: String,
    checks: Vec<VerifyRow>,
}

#[derive(Debug, Serialize)]
struct VerifyRow {
    name: String,
    passed: bool,
    detail: String,
}

pub fn cmd_verify(config: &ExperimentConfig, out: &Path) -> Result<Vec<CheckReport>> {
    let (gmm, proc) = lindiff::datasets::fade_gmm_2d()?;
    let reports = vec![
        score_identity_suite(&gmm, &proc, &[0.3, 0.6, 0.9], 20_000, config.seed)?,
        gradient_check_suite(50, 1e-4, config.seed),
        ve_reduction_suite(1000, config.seed)?,
        oracle_sampler_suite(2000, 64, 0.1, config.seed)?,
    ];
    write_json(
        &out.join("verify.json"),
        &VerifyArtifact {
            config_hash: hash_hex(config),
            checks: reports
                .iter()
                .map(|r| VerifyRow {
                    name: r.name.clone(),
                    passed: r.passed,
                    detail: r.detail.clone(),
                })
                .collect(),
        },
    )?;
    Ok(reports)
}

pub fn cmd_sweep_nfe(
    config: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    steps: &[usize],
) -> Result<PathBuf> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument {
            reason: "sweep-nfe needs --steps, e.g. --steps 8,16,32,64,128".into(),
        });
    }
    let (train_data, holdout) = config.build_datasets()?;
    let proc = config.build_process()?;
    let p1 = TerminalDistribution::from_dataset(&proc, &train_data)?;
    let holdout_flat: Vec<Tensor> = holdout
        .iter()
        .map(|x| x.clone().reshape(vec![x.len()]).expect("same length"))
        .collect();

    let mut rows = Vec::new();
    for &num_steps in steps {
        let (denoiser, _) = build_denoiser(config, &proc, checkpoint, num_steps)?;
        let cfg = SamplerConfig::new(
            num_steps,
            config.sampler.mode,
            config.seed ^ STREAM_SAMPLE ^ (num_steps as u64) << 32,
        )?;
        let samples = sample_batch(
            denoiser.as_ref(),
            &proc,
            &cfg,
            &p1,
            config.sampler.num_samples,
            config.sampler.kind,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ STREAM_EVAL);
        let metric = empirical_distance(
            &samples,
            &holdout_flat,
            config.schedule.num_projections,
            &mut rng,
        )?;
        rows.push((num_steps, metric));
    }
    let mut csv = String::from("nfe,sliced_w2\n");
    for (nfe, metric) in &rows {
        csv.push_str(&format!("{nfe},{metric}\n"));
    }
    let path = out.join("sweep.csv");
    std::fs::write(&path, csv)?;
    write_json(
        &out.join("sweep.meta.json"),
        &serde_json::json!({
            "config_hash": hash_hex(config),
            "seed": config.seed,
            "steps": steps,
        }),
    )?;
    Ok(path)
}

