//! Built-in synthetic datasets and the pinned benchmark setups.
//!
//! Two dataset flavors, no downloads: low-dimensional Gaussian mixtures
//! (where every quantity has a closed form) and 8x8 procedural "blob" images
//! (sums of one to three grid Gaussians, normalized to [0, 1]) so that blur
//! is a meaningful corruption.

use rand::Rng;

use crate::error::Result;
use crate::linalg::Mat;
use crate::operators::{CorruptionProcess, OperatorFamily, Schedule};
use crate::oracle::GaussianMixture;
use crate::tensor::Tensor;

/// One procedural blob image: k in {1,2,3} Gaussians with random centers,
/// widths and amplitudes, normalized so the peak is 1.
pub fn blob_image<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Tensor {
    let k = rng.random_range(1..=3usize);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..k)
        .map(|_| {
            (
                rng.random::<f64>() * (height as f64 - 1.0),
                rng.random::<f64>() * (width as f64 - 1.0),
                0.8 + 1.4 * rng.random::<f64>(),
                0.4 + 0.6 * rng.random::<f64>(),
            )
        })
        .collect();
    let mut data = vec![0.0; height * width];
    for i in 0..height {
        for j in 0..width {
            let mut v = 0.0;
            for &(ci, cj, std, amp) in &blobs {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                v += amp * (-d2 / (2.0 * std * std)).exp();
            }
            data[i * width + j] = v;
        }
    }
    let max = data.iter().cloned().fold(f64::MIN, f64::max);
    for v in &mut data {
        *v /= max;
    }
    Tensor::from_rows(height, width, data).unwrap()
}

pub fn blob_dataset<R: Rng + ?Sized>(
    count: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Vec<Tensor> {
    (0..count).map(|_| blob_image(height, width, rng)).collect()
}

/// A deterministic two-blob 8x8 image used as the mean of image-space
/// Gaussian benchmarks.
pub fn reference_blob_8x8() -> Tensor {
    let blobs = [(2.0f64, 2.5f64, 1.2f64, 1.0f64), (5.5, 5.0, 1.6, 0.7)];
    let mut data = vec![0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut v = 0.0;
            for &(ci, cj, std, amp) in &blobs {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                v += amp * (-d2 / (2.0 * std * std)).exp();
            }
            data[i * 8 + j] = v;
        }
    }
    let max = data.iter().cloned().fold(f64::MIN, f64::max);
    for v in &mut data {
        *v /= max;
    }
    Tensor::from_rows(8, 8, data).unwrap()
}

/// Benchmark: 2-D Gaussian under uniform diagonal fade (to 0.05) plus the
/// default noise ramp. Everything about it is tractable in closed form.
pub fn fade_gaussian_2d() -> Result<(GaussianMixture, CorruptionProcess)> {
    let cov = Mat::from_rows(vec![vec![0.25, 0.08], vec![0.08, 0.16]])?;
    let gmm = GaussianMixture::single(vec![1.0, -0.5], cov)?;
    let schedule = Schedule::three_point("fade-gaussian-2d", 0.0, 0.95, 1e-3, 0.1, 0.2)?;
    let proc = CorruptionProcess::new(OperatorFamily::DiagonalFade { dim: 2 }, schedule)?;
    Ok((gmm, proc))
}

/// Benchmark: 3-component 2-D mixture under the same fade process; used for
/// the score-identity checks.
pub fn fade_gmm_2d() -> Result<(GaussianMixture, CorruptionProcess)> {
    let gmm = GaussianMixture::new(
        vec![0.5, 0.3, 0.2],
        vec![vec![-1.0, -0.5], vec![1.2, 0.8], vec![0.2, -1.4]],
        vec![
            Mat::from_rows(vec![vec![0.30, 0.05], vec![0.05, 0.20]])?,
            Mat::from_rows(vec![vec![0.25, -0.08], vec![-0.08, 0.35]])?,
            Mat::from_rows(vec![vec![0.15, 0.0], vec![0.0, 0.15]])?,
        ],
    )?;
    let schedule = Schedule::three_point("fade-gmm-2d", 0.0, 0.95, 1e-3, 0.1, 0.2)?;
    let proc = CorruptionProcess::new(OperatorFamily::DiagonalFade { dim: 2 }, schedule)?;
    Ok((gmm, proc))
}

/// Benchmark: Gaussian over 8x8 images centered on a blob, corrupted by real
/// Gaussian blur (half-size 8, std 0.01 -> 6) plus the noise ramp.
pub fn blur_gaussian_8x8() -> Result<(GaussianMixture, CorruptionProcess)> {
    let mean = reference_blob_8x8();
    let gmm = GaussianMixture::isotropic(mean.into_data(), 0.01)?;
    let schedule = Schedule::three_point("blur-gaussian-8x8", 0.01, 6.0, 1e-3, 0.1, 0.2)?;
    let proc = CorruptionProcess::new(
        OperatorFamily::GaussianBlur {
            height: 8,
            width: 8,
            kernel_half_size: 8,
        },
        schedule,
    )?;
    Ok((gmm, proc))
}

/// Benchmark: 3-component mixture of blob images under the same blur process;
/// the sampler-ablation testbed. Component variance is sized so within-class
/// texture carries a visible share of the distribution's spread (that is the
/// part a collapsing sampler destroys).
pub fn blur_gmm_8x8() -> Result<(GaussianMixture, CorruptionProcess)> {
    let blobs = [
        [(1.5f64, 1.5f64, 1.0f64, 1.0f64), (6.0, 6.0, 1.3, 0.6)],
        [(2.0, 5.5, 1.5, 1.0), (5.0, 1.5, 1.0, 0.8)],
        [(4.0, 3.5, 2.0, 1.0), (1.0, 6.0, 0.9, 0.5)],
    ];
    let mut means = Vec::new();
    for set in &blobs {
        let mut data = vec![0.0; 64];
        for i in 0..8 {
            for j in 0..8 {
                let mut v = 0.0;
                for &(ci, cj, std, amp) in set {
                    let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                    v += amp * (-d2 / (2.0 * std * std)).exp();
                }
                data[i * 8 + j] = v;
            }
        }
        let max = data.iter().cloned().fold(f64::MIN, f64::max);
        for v in &mut data {
            *v /= max;
        }
        means.push(data);
    }
    let gmm = GaussianMixture::new(
        vec![0.5, 0.3, 0.2],
        means,
        vec![
            Mat::identity(64).scale(0.09),
            Mat::identity(64).scale(0.09),
            Mat::identity(64).scale(0.09),
        ],
    )?;
    let schedule = Schedule::three_point("blur-gmm-8x8", 0.01, 6.0, 1e-3, 0.1, 0.2)?;
    let proc = CorruptionProcess::new(
        OperatorFamily::GaussianBlur {
            height: 8,
            width: 8,
            kernel_half_size: 8,
        },
        schedule,
    )?;
    Ok((gmm, proc))
}
