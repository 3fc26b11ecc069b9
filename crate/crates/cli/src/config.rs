//! Experiment configuration: one JSON file drives every command.
//!
//! The effective config (after command-line overrides) is hashed with
//! FNV-1a 64 and the hash is stamped into every artifact a command writes,
//! so downstream commands can refuse mismatched inputs.

use serde::{Deserialize, Serialize};

use lindiff::error::{Error, Result};
use lindiff::objective::Weighting;
use lindiff::operators::{CorruptionProcess, OperatorFamily, Schedule};
use lindiff::oracle::GaussianMixture;
use lindiff::sampler::{NoiseEstimate, SamplerKind};
use lindiff::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    /// Gaussian-mixture data; closed-form oracles apply.
    Gmm {
        gmm: serde_json::Value,
        train_size: usize,
        holdout_size: usize,
    },
    /// Procedural blob images.
    Blobs {
        height: usize,
        width: usize,
        train_size: usize,
        holdout_size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Identity,
    Blur,
    Fade,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub family: FamilyKind,
    #[serde(default = "default_half_size")]
    pub kernel_half_size: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    #[serde(default = "default_denoise_end")]
    pub denoise_end: f64,
}

fn default_half_size() -> usize {
    8
}

fn default_denoise_end() -> f64 {
    lindiff::operators::DENOISE_STAGE_END
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleSource {
    /// Shortest-path selection over a candidate grid.
    Auto,
    /// Load a schedule JSON file.
    File,
    /// MSE-matched baseline against a reference noise ramp.
    MseMatched,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub source: ScheduleSource,
    #[serde(default)]
    pub file: Option<String>,
    #[serde(default = "default_num_candidates")]
    pub num_candidates: usize,
    #[serde(default = "default_cloud_size")]
    pub cloud_size: usize,
    #[serde(default = "default_target_path_len")]
    pub target_path_len: usize,
    #[serde(default = "default_num_projections")]
    pub num_projections: usize,
    /// Reference noise ramp for the mse-matched source.
    #[serde(default = "default_reference_sigma_min")]
    pub reference_sigma_min: f64,
    #[serde(default = "default_reference_sigma_max")]
    pub reference_sigma_max: f64,
    #[serde(default = "default_reference_points")]
    pub reference_points: usize,
}

fn default_num_candidates() -> usize {
    lindiff::scheduler::REFERENCE_NUM_CANDIDATES
}

fn default_cloud_size() -> usize {
    lindiff::scheduler::DEFAULT_CLOUD_SIZE
}

fn default_target_path_len() -> usize {
    lindiff::scheduler::REFERENCE_TARGET_PATH_LEN
}

fn default_num_projections() -> usize {
    lindiff::scheduler::DEFAULT_PROJECTIONS
}

fn default_reference_sigma_min() -> f64 {
    0.002
}

fn default_reference_sigma_max() -> f64 {
    5.0
}

fn default_reference_points() -> usize {
    33
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_time_frequencies")]
    pub time_frequencies: usize,
}

fn default_hidden_width() -> usize {
    128
}

fn default_hidden_layers() -> usize {
    3
}

fn default_time_frequencies() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub linear_decay: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
}

fn default_batch_size() -> usize {
    128
}

fn default_lr() -> f64 {
    2e-4
}

fn default_warmup() -> usize {
    500
}

fn default_clip() -> f64 {
    1.0
}

fn default_weighting() -> Weighting {
    Weighting::Sigma4
}

fn default_t_min() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    #[serde(default = "default_num_steps")]
    pub num_steps: usize,
    #[serde(default = "default_mode")]
    pub mode: NoiseEstimate,
    #[serde(default = "default_kind")]
    pub kind: SamplerKind,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
}

fn default_num_steps() -> usize {
    64
}

fn default_mode() -> NoiseEstimate {
    NoiseEstimate::Normalized
}

fn default_kind() -> SamplerKind {
    SamplerKind::Momentum
}

fn default_num_samples() -> usize {
    2048
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub corruption: CorruptionSpec,
    pub schedule: ScheduleSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub sampler: SamplerSpec,
    pub seed: u64,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::InvalidArgument {
            reason: format!("config {}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidArgument { reason });
        let c = &self.corruption;
        if !(c.sigma_min >= 0.0 && c.sigma_max >= c.sigma_min) {
            return fail(format!(
                "corruption.sigma_min/sigma_max invalid: {} / {}",
                c.sigma_min, c.sigma_max
            ));
        }
        if c.theta_max < c.theta_min {
            return fail(format!(
                "corruption.theta_max {} below theta_min {}",
                c.theta_max, c.theta_min
            ));
        }
        if !(0.0 < c.denoise_end && c.denoise_end < 1.0) {
            return fail(format!("corruption.denoise_end {} outside (0, 1)", c.denoise_end));
        }
        match c.family {
            FamilyKind::Blur if c.kernel_half_size == 0 => {
                return fail("corruption.kernel_half_size must be positive for blur".into())
            }
            FamilyKind::Blur if c.theta_min <= 0.0 => {
                return fail("corruption.theta_min must be positive for blur".into())
            }
            FamilyKind::Fade if c.theta_max >= 1.0 => {
                return fail("corruption.theta_max must stay below 1 for fade".into())
            }
            _ => {}
        }
        if self.schedule.source == ScheduleSource::File && self.schedule.file.is_none() {
            return fail("schedule.source = file requires schedule.file".into());
        }
        if self.schedule.num_candidates < 2 {
            return fail("schedule.num_candidates must be at least 2".into());
        }
        if self.sampler.num_samples == 0 {
            return fail("sampler.num_samples must be positive".into());
        }
        if self.train.t_min <= 0.0 {
            return fail("train.t_min must be positive".into());
        }
        match &self.dataset {
            DatasetSpec::Gmm { train_size, holdout_size, .. }
            | DatasetSpec::Blobs { train_size, holdout_size, .. } => {
                if *train_size == 0 || *holdout_size == 0 {
                    return fail("dataset sizes must be positive".into());
                }
            }
        }
        // The dataset dimension must match the corruption family.
        let _ = self.data_dim()?;
        Ok(())
    }

    /// Data dimension implied by the dataset spec, checked against the
    /// corruption family.
    pub fn data_dim(&self) -> Result<usize> {
        let dim = match &self.dataset {
            DatasetSpec::Gmm { gmm, .. } => self.parse_gmm_from(gmm)?.dim(),
            DatasetSpec::Blobs { height, width, .. } => height * width,
        };
        if let FamilyKind::Blur = self.corruption.family {
            match &self.dataset {
                DatasetSpec::Blobs { .. } => {}
                DatasetSpec::Gmm { .. } => {
                    // Image-space mixtures are fine as long as the blur grid
                    // matches; require a square grid implied by dim.
                    let side = (dim as f64).sqrt() as usize;
                    if side * side != dim {
                        return Err(Error::InvalidArgument {
                            reason: format!("blur corruption needs a square data dim, got {dim}"),
                        });
                    }
                }
            }
        }
        Ok(dim)
    }

    fn parse_gmm_from(&self, value: &serde_json::Value) -> Result<GaussianMixture> {
        GaussianMixture::from_json(&value.to_string())
    }

    pub fn gmm(&self) -> Result<Option<GaussianMixture>> {
        match &self.dataset {
            DatasetSpec::Gmm { gmm, .. } => Ok(Some(self.parse_gmm_from(gmm)?)),
            DatasetSpec::Blobs { .. } => Ok(None),
        }
    }

    pub fn operator_family(&self) -> Result<OperatorFamily> {
        let dim = self.data_dim()?;
        Ok(match self.corruption.family {
            FamilyKind::Identity => OperatorFamily::Identity { dim },
            FamilyKind::Fade => OperatorFamily::DiagonalFade { dim },
            FamilyKind::Blur => {
                let (height, width) = match &self.dataset {
                    DatasetSpec::Blobs { height, width, .. } => (*height, *width),
                    DatasetSpec::Gmm { .. } => {
                        let side = (dim as f64).sqrt() as usize;
                        (side, side)
                    }
                };
                OperatorFamily::GaussianBlur {
                    height,
                    width,
                    kernel_half_size: self.corruption.kernel_half_size,
                }
            }
        })
    }

    /// The corruption process used by train/sample/eval: either the schedule
    /// file named in the config or the default three-point grid.
    pub fn build_process(&self) -> Result<CorruptionProcess> {
        let family = self.operator_family()?;
        let schedule = match (&self.schedule.source, &self.schedule.file) {
            (ScheduleSource::File, Some(path)) => Schedule::load(std::path::Path::new(path))?,
            _ => Schedule::three_point(
                self.dataset_tag(),
                self.corruption.theta_min,
                self.corruption.theta_max,
                self.corruption.sigma_min,
                self.corruption.sigma_max,
                self.corruption.denoise_end,
            )?,
        };
        CorruptionProcess::new(family, schedule)
    }

    pub fn dataset_tag(&self) -> String {
        match &self.dataset {
            DatasetSpec::Gmm { .. } => "gmm".into(),
            DatasetSpec::Blobs { height, width, .. } => format!("blobs{height}x{width}"),
        }
    }

    /// Synthesize the train and holdout splits (deterministic given the seed).
    pub fn build_datasets(&self) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0xD47A_5E7D);
        Ok(match &self.dataset {
            DatasetSpec::Gmm { train_size, holdout_size, .. } => {
                let gmm = self.gmm()?.expect("gmm dataset");
                let train = gmm.sample_many(*train_size, &mut rng);
                let holdout = gmm.sample_many(*holdout_size, &mut rng);
                (train, holdout)
            }
            DatasetSpec::Blobs { height, width, train_size, holdout_size } => {
                let train = lindiff::datasets::blob_dataset(*train_size, *height, *width, &mut rng);
                let holdout =
                    lindiff::datasets::blob_dataset(*holdout_size, *height, *width, &mut rng);
                (train, holdout)
            }
        })
    }

    /// FNV-1a 64 over the canonical JSON of the effective config, with the
    /// output directory blanked: the hash identifies the experiment, not
    /// where its artifacts land.
    pub fn hash(&self) -> u64 {
        let mut canonical = self.clone();
        canonical.output_dir = String::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}
