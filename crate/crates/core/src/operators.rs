//! Linear corruption operators and the forward corruption process.
//!
//! A corruption process maps clean data `x_0` to `x_t = C_t x_0 + sigma_t z`
//! with `z ~ N(0, I)`. The operator family `C_t` is one of identity, 2-D
//! Gaussian blur with zero padding, or a per-coordinate diagonal fade; its
//! single scalar parameter is piecewise-linearly interpolated over a
//! [`Schedule`] grid. The noise scale `sigma_t` is interpolated geometrically
//! between grid values, which reproduces the usual geometric noise ramp on
//! the initial denoising stage and stays constant on flat segments.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noise floor used by the training paths: the loss divides by `sigma_t^2`,
/// so scores are never evaluated below this.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Constant noise level of the corruption stage (the initial denoising stage
/// ramps from [`SIGMA_FLOOR`] up to this).
pub const DEFAULT_SIGMA_MAX: f64 = 0.1;

/// Fraction of diffusion time occupied by the pure-denoising stage.
pub const DENOISE_STAGE_END: f64 = 0.2;

/// A deterministic linear map on R^n.
///
/// Every supported kind is symmetric as a matrix (blur kernels are even and
/// applied with zero padding), so the transpose coincides with the map
/// itself; [`LinearOperator::apply_transpose`] relies on that.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator {
    Identity {
        dim: usize,
    },
    GaussianBlur {
        height: usize,
        width: usize,
        kernel_half_size: usize,
        std: f64,
        /// 1-D kernel factor, length `2 * kernel_half_size + 1`, normalized
        /// so the separable 2-D product kernel sums to 1.
        kernel: Vec<f64>,
    },
    DiagonalFade {
        /// Per-coordinate scale in [0, 1].
        scales: Vec<f64>,
    },
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        LinearOperator::Identity { dim }
    }

    /// Gaussian blur over an `height x width` image, sampled on the integer
    /// grid `[-h, h]^2` and normalized to sum 1, applied as zero-padded
    /// convolution. The 2-D kernel factorizes, so each axis uses the 1-D
    /// factor normalized to sum 1.
    pub fn gaussian_blur(height: usize, width: usize, kernel_half_size: usize, std: f64) -> Result<Self> {
        if std <= 0.0 || !std.is_finite() {
            return Err(Error::InvalidArgument {
                reason: format!("blur std must be positive and finite, got {std}"),
            });
        }
        if kernel_half_size == 0 {
            return Err(Error::InvalidArgument {
                reason: "kernel_half_size must be positive".into(),
            });
        }
        let h = kernel_half_size as isize;
        let mut kernel: Vec<f64> = (-h..=h)
            .map(|d| {
                let d = d as f64;
                (-d * d / (2.0 * std * std)).exp()
            })
            .collect();
        let total: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= total;
        }
        Ok(LinearOperator::GaussianBlur {
            height,
            width,
            kernel_half_size,
            std,
            kernel,
        })
    }

    pub fn diagonal_fade(scales: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::InvalidArgument {
                reason: "fade scales must lie in [0, 1]".into(),
            });
        }
        Ok(LinearOperator::DiagonalFade { scales })
    }

    /// Input/output dimension n.
    pub fn dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } => *dim,
            LinearOperator::GaussianBlur { height, width, .. } => height * width,
            LinearOperator::DiagonalFade { scales } => scales.len(),
        }
    }

    /// Apply the operator: `C x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        match self {
            LinearOperator::Identity { .. } => Ok(x.clone()),
            LinearOperator::DiagonalFade { scales } => {
                let data = x
                    .data()
                    .iter()
                    .zip(scales)
                    .map(|(v, s)| v * s)
                    .collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            LinearOperator::GaussianBlur {
                height,
                width,
                kernel_half_size,
                kernel,
                ..
            } => {
                let out = blur_separable(x.data(), *height, *width, *kernel_half_size, kernel);
                Tensor::new(x.shape().to_vec(), out)
            }
        }
    }

    /// Apply the transpose `C^T x`. All supported kinds are symmetric.
    pub fn apply_transpose(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x)
    }
}

/// Zero-padded separable convolution with an even 1-D kernel factor.
fn blur_separable(x: &[f64], height: usize, width: usize, half: usize, kernel: &[f64]) -> Vec<f64> {
    let h = half as isize;
    let mut tmp = vec![0.0; x.len()];
    // Horizontal pass.
    for row in 0..height {
        let base = row * width;
        for col in 0..width {
            let mut acc = 0.0;
            for d in -h..=h {
                let c = col as isize + d;
                if c >= 0 && (c as usize) < width {
                    acc += kernel[(d + h) as usize] * x[base + c as usize];
                }
            }
            tmp[base + col] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; x.len()];
    for row in 0..height {
        for col in 0..width {
            let mut acc = 0.0;
            for d in -h..=h {
                let r = row as isize + d;
                if r >= 0 && (r as usize) < height {
                    acc += kernel[(d + h) as usize] * tmp[r as usize * width + col];
                }
            }
            out[row * width + col] = acc;
        }
    }
    out
}

/// One grid point of a corruption schedule.
///
/// `blur_std` is the scalar corruption parameter of the configured operator
/// family (an actual blur std for blur, the fade amount for diagonal fade);
/// the field name is fixed by the schedule file format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub t: f64,
    pub blur_std: f64,
    pub sigma: f64,
}

/// An ordered corruption schedule plus the metadata of how it was chosen.
///
/// Serializes as
/// `{"dataset": str, "metric": str, "epsilon": real, "entries": [{"t", "blur_std", "sigma"}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub dataset: String,
    pub metric: String,
    pub epsilon: f64,
    pub entries: Vec<ScheduleEntry>,
}

impl Schedule {
    pub fn new(
        dataset: impl Into<String>,
        metric: impl Into<String>,
        epsilon: f64,
        entries: Vec<ScheduleEntry>,
    ) -> Result<Self> {
        let s = Schedule {
            dataset: dataset.into(),
            metric: metric.into(),
            epsilon,
            entries,
        };
        s.validate()?;
        Ok(s)
    }

    /// The default three-point grid: denoising ramp on `[0, denoise_end]` at
    /// the minimum corruption parameter, then the corruption ramp to `t = 1`
    /// at constant noise. `epsilon` is recorded as 0 since no distance graph
    /// was involved.
    pub fn three_point(
        dataset: impl Into<String>,
        theta_min: f64,
        theta_max: f64,
        sigma_min: f64,
        sigma_max: f64,
        denoise_end: f64,
    ) -> Result<Self> {
        Schedule::new(
            dataset,
            "default",
            0.0,
            vec![
                ScheduleEntry {
                    t: 0.0,
                    blur_std: theta_min,
                    sigma: sigma_min,
                },
                ScheduleEntry {
                    t: denoise_end,
                    blur_std: theta_min,
                    sigma: sigma_max,
                },
                ScheduleEntry {
                    t: 1.0,
                    blur_std: theta_max,
                    sigma: sigma_max,
                },
            ],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidSchedule { reason });
        if self.entries.len() < 2 {
            return fail("need at least entries at t = 0 and t = 1".into());
        }
        if self.entries.first().unwrap().t != 0.0 {
            return fail(format!(
                "first entry must have t = 0, got {}",
                self.entries.first().unwrap().t
            ));
        }
        if self.entries.last().unwrap().t != 1.0 {
            return fail(format!(
                "last entry must have t = 1, got {}",
                self.entries.last().unwrap().t
            ));
        }
        for pair in self.entries.windows(2) {
            if pair[1].t <= pair[0].t {
                return fail(format!(
                    "entries must be strictly increasing in t: {} then {}",
                    pair[0].t, pair[1].t
                ));
            }
            if pair[1].sigma < pair[0].sigma {
                return fail(format!(
                    "sigma must be non-decreasing: {} then {}",
                    pair[0].sigma, pair[1].sigma
                ));
            }
            if pair[1].blur_std < pair[0].blur_std {
                return fail(format!(
                    "blur_std must be non-decreasing: {} then {}",
                    pair[0].blur_std, pair[1].blur_std
                ));
            }
        }
        for e in &self.entries {
            if !(e.t.is_finite() && e.blur_std.is_finite() && e.sigma.is_finite()) {
                return fail("entries must be finite".into());
            }
            if e.sigma < 0.0 || e.blur_std < 0.0 {
                return fail("sigma and blur_std must be non-negative".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let s: Schedule = serde_json::from_str(json)?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Piecewise-linear interpolation of the corruption parameter.
    pub fn theta_at(&self, t: f64) -> f64 {
        self.interpolate(t, |e| e.blur_std, false)
    }

    /// Piecewise-geometric interpolation of sigma (linear fallback when a
    /// segment endpoint is zero).
    pub fn sigma_at(&self, t: f64) -> f64 {
        self.interpolate(t, |e| e.sigma, true)
    }

    fn interpolate(&self, t: f64, field: impl Fn(&ScheduleEntry) -> f64, geometric: bool) -> f64 {
        let entries = &self.entries;
        // Exact grid hits return the grid value.
        if let Some(e) = entries.iter().find(|e| e.t == t) {
            return field(e);
        }
        let hi = entries.partition_point(|e| e.t < t).min(entries.len() - 1);
        let lo = hi.saturating_sub(1);
        let (a, b) = (&entries[lo], &entries[hi]);
        let u = (t - a.t) / (b.t - a.t);
        let (va, vb) = (field(a), field(b));
        if va == vb {
            va
        } else if geometric && va > 0.0 && vb > 0.0 {
            va.powf(1.0 - u) * vb.powf(u)
        } else {
            va + u * (vb - va)
        }
    }
}

/// The operator family a schedule's scalar parameter indexes into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OperatorFamily {
    /// No deterministic corruption; the parameter is ignored.
    Identity { dim: usize },
    /// Gaussian blur with a fixed kernel half-size; the parameter is the std.
    GaussianBlur {
        height: usize,
        width: usize,
        kernel_half_size: usize,
    },
    /// Uniform diagonal fade; parameter theta in [0, 1) gives scale 1 - theta.
    DiagonalFade { dim: usize },
    /// Anisotropic fade: coordinate i decays at `rates[i]` in [0, 1], giving
    /// scale `1 - theta * rates[i]`.
    FadeProfile { rates: Vec<f64> },
}

impl OperatorFamily {
    pub fn dim(&self) -> usize {
        match self {
            OperatorFamily::Identity { dim } => *dim,
            OperatorFamily::GaussianBlur { height, width, .. } => height * width,
            OperatorFamily::DiagonalFade { dim } => *dim,
            OperatorFamily::FadeProfile { rates } => rates.len(),
        }
    }

    pub fn operator_for(&self, theta: f64) -> Result<LinearOperator> {
        match self {
            OperatorFamily::Identity { dim } => Ok(LinearOperator::identity(*dim)),
            OperatorFamily::GaussianBlur {
                height,
                width,
                kernel_half_size,
            } => LinearOperator::gaussian_blur(*height, *width, *kernel_half_size, theta),
            OperatorFamily::DiagonalFade { dim } => {
                LinearOperator::diagonal_fade(vec![(1.0 - theta).clamp(0.0, 1.0); *dim])
            }
            OperatorFamily::FadeProfile { rates } => LinearOperator::diagonal_fade(
                rates
                    .iter()
                    .map(|r| (1.0 - theta * r).clamp(0.0, 1.0))
                    .collect(),
            ),
        }
    }
}

/// The continuous corruption process `t -> (C_t, sigma_t)` over `t in [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionProcess {
    family: OperatorFamily,
    schedule: Schedule,
}

impl CorruptionProcess {
    pub fn new(family: OperatorFamily, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        Ok(CorruptionProcess { family, schedule })
    }

    /// Dimension n of the data the process acts on.
    pub fn dim(&self) -> usize {
        self.family.dim()
    }

    pub fn family(&self) -> &OperatorFamily {
        &self.family
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::TimeOutOfRange { t });
        }
        Ok(())
    }

    /// Interpolated corruption parameter at time t.
    pub fn theta_at(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.schedule.theta_at(t))
    }

    /// The corruption operator at time t.
    pub fn operator_at(&self, t: f64) -> Result<LinearOperator> {
        Self::check_t(t)?;
        self.family.operator_for(self.schedule.theta_at(t))
    }

    /// The noise scale at time t.
    pub fn sigma_at(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.schedule.sigma_at(t))
    }

    /// Draw from the perturbation kernel `N(C_t x0, sigma_t^2 I)`.
    pub fn sample_perturbation<R: Rng + ?Sized>(
        &self,
        x0: &Tensor,
        t: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        Ok(self.perturb_with_noise(x0, t, rng)?.0)
    }

    /// As [`sample_perturbation`](Self::sample_perturbation) but also returns
    /// the standard-normal draw, which the training objective needs.
    pub fn perturb_with_noise<R: Rng + ?Sized>(
        &self,
        x0: &Tensor,
        t: f64,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        let op = self.operator_at(t)?;
        let sigma = self.sigma_at(t)?;
        let mut x_t = op.apply(x0)?;
        let noise: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        for (v, z) in x_t.data_mut().iter_mut().zip(&noise) {
            *v += sigma * z;
        }
        let z = Tensor::new(x0.shape().to_vec(), noise)?;
        Ok((x_t, z))
    }
}
