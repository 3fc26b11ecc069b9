//! Corruption-level selection.
//!
//! Candidate corruption parameters are compared through an empirical sliced
//! 2-Wasserstein distance (random 1-D projections, exact sorted-sample
//! transport per projection, averaged). A graph over the candidates keeps an
//! edge only where the distance is at most epsilon, and the schedule is the
//! minimum-cost path from the clean distribution to the terminal one.
//! Epsilon itself is calibrated by bisection over the observed distances
//! until the path has a requested node count.
//!
//! The distance-matrix path shares one projection set and one base-sample set
//! across all candidates (common random numbers), which keeps the matrix
//! exactly symmetric and removes most estimator variance from neighboring
//! comparisons.
//!
//! Also here: the MSE-matched baseline schedule, which picks, per time, the
//! corruption parameter whose normalized clean-to-corrupted MSE ratio matches
//! a reference noise-only schedule.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::{OperatorFamily, Schedule, ScheduleEntry, DENOISE_STAGE_END};
use crate::tensor::Tensor;

/// Default number of random projections for sliced distances.
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Default candidate count and selected-path length mirroring the reference
/// configuration (256 candidates thinned to a 32-node path).
pub const REFERENCE_NUM_CANDIDATES: usize = 256;
pub const REFERENCE_TARGET_PATH_LEN: usize = 32;
/// Default per-candidate sample-cloud size.
pub const DEFAULT_CLOUD_SIZE: usize = 2048;

/// Exact squared 1-D W2 between empirical distributions via merged quantile
/// functions; exact for unequal sizes too (integer breakpoint arithmetic).
fn w2_sq_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut u = 0usize; // in units of 1/(n*m)
    let mut acc = 0.0;
    while ia < n && ib < m {
        let na = (ia + 1) * m;
        let nb = (ib + 1) * n;
        let next = na.min(nb);
        let d = a[ia] - b[ib];
        acc += (next - u) as f64 * d * d;
        u = next;
        if na == next {
            ia += 1;
        }
        if nb == next {
            ib += 1;
        }
    }
    acc / (n * m) as f64
}

fn sorted_projection(cloud: &[Tensor], dir: &[f64]) -> Vec<f64> {
    let mut proj: Vec<f64> = cloud.iter().map(|x| x.dot_slice(dir)).collect();
    proj.sort_by(|a, b| a.partial_cmp(b).unwrap());
    proj
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Sliced 2-Wasserstein estimate between two point clouds: the average over
/// random unit projections of the exact 1-D W2 distance.
pub fn empirical_distance<R: Rng + ?Sized>(
    a: &[Tensor],
    b: &[Tensor],
    num_projections: usize,
    rng: &mut R,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument {
            reason: "point clouds must be non-empty".into(),
        });
    }
    let dim = a[0].len();
    if b[0].len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: b[0].len(),
        });
    }
    let mut total = 0.0;
    for _ in 0..num_projections.max(1) {
        let dir = random_unit(dim, rng);
        let pa = sorted_projection(a, &dir);
        let pb = sorted_projection(b, &dir);
        total += w2_sq_sorted(&pa, &pb).sqrt();
    }
    Ok(total / num_projections.max(1) as f64)
}

/// Candidate corruption levels and an empirical sample cloud per level.
///
/// All clouds are built from one base-sample set with one noise draw per
/// point: candidate 0 is "clean plus floor noise" (the data distribution),
/// every later candidate gets the constant corruption-stage noise.
#[derive(Debug, Clone)]
pub struct CandidateGrid {
    pub thetas: Vec<f64>,
    pub clouds: Vec<Vec<Tensor>>,
}

impl CandidateGrid {
    pub fn build<R: Rng + ?Sized>(
        family: &OperatorFamily,
        thetas: Vec<f64>,
        data: &[Tensor],
        sigma_min: f64,
        sigma_max: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if thetas.len() < 2 {
            return Err(Error::InvalidArgument {
                reason: "need at least two candidate levels".into(),
            });
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument {
                reason: "candidate grid needs base samples".into(),
            });
        }
        let n = family.dim();
        // Common random numbers: one z per base point, reused at every level.
        let noises: Vec<Vec<f64>> = data
            .iter()
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut clouds = Vec::with_capacity(thetas.len());
        for (i, &theta) in thetas.iter().enumerate() {
            let op = family.operator_for(theta)?;
            let sigma = if i == 0 { sigma_min } else { sigma_max };
            let cloud = data
                .iter()
                .zip(&noises)
                .map(|(x0, z)| {
                    let mut y = op.apply(x0)?;
                    for (v, zi) in y.data_mut().iter_mut().zip(z) {
                        *v += sigma * zi;
                    }
                    Ok(y)
                })
                .collect::<Result<Vec<_>>>()?;
            clouds.push(cloud);
        }
        Ok(CandidateGrid { thetas, clouds })
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// Full symmetric pairwise distance matrix over the grid, with one shared
/// projection set (deterministic given `seed`). Pairs run in parallel.
pub fn distance_matrix(grid: &CandidateGrid, num_projections: usize, seed: u64) -> Vec<Vec<f64>> {
    let t = grid.len();
    let dim = grid.clouds[0][0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..num_projections.max(1))
        .map(|_| random_unit(dim, &mut rng))
        .collect();
    // Pre-sort every (candidate, projection) once.
    let projected: Vec<Vec<Vec<f64>>> = grid
        .clouds
        .par_iter()
        .map(|cloud| dirs.iter().map(|d| sorted_projection(cloud, d)).collect())
        .collect();
    let pairs: Vec<(usize, usize)> = (0..t)
        .flat_map(|i| ((i + 1)..t).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let total: f64 = projected[i]
                .iter()
                .zip(&projected[j])
                .map(|(a, b)| w2_sq_sorted(a, b).sqrt())
                .sum();
            total / dirs.len() as f64
        })
        .collect();
    let mut matrix = vec![vec![0.0; t]; t];
    for (&(i, j), &d) in pairs.iter().zip(&dists) {
        matrix[i][j] = d;
        matrix[j][i] = d;
    }
    matrix
}

/// The epsilon-thresholded distribution graph: edges with distance greater
/// than epsilon are absent (infinite weight).
#[derive(Debug, Clone)]
pub struct DistanceGraph {
    pub weights: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl DistanceGraph {
    pub fn threshold(dists: &[Vec<f64>], epsilon: f64) -> Self {
        let t = dists.len();
        let mut weights = vec![vec![f64::INFINITY; t]; t];
        for i in 0..t {
            weights[i][i] = 0.0;
            for j in 0..t {
                if i != j && dists[i][j] <= epsilon {
                    weights[i][j] = dists[i][j];
                }
            }
        }
        DistanceGraph { weights, epsilon }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub cost: f64,
    pub nodes: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapState {
    cost: f64,
    node: usize,
}

impl Eq for HeapState {}

impl Ord for HeapState {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap by (cost, node); the node component makes pops, and hence
        // tie-breaking, deterministic.
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapState {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra from node 0 to node T-1 over non-negative weights.
pub fn shortest_path(graph: &DistanceGraph) -> Result<PathResult> {
    let t = graph.len();
    if t < 2 {
        return Err(Error::InvalidArgument {
            reason: "graph needs at least two nodes".into(),
        });
    }
    let (from, to) = (0, t - 1);
    let mut dist = vec![f64::INFINITY; t];
    let mut prev = vec![usize::MAX; t];
    let mut heap = BinaryHeap::new();
    dist[from] = 0.0;
    heap.push(HeapState { cost: 0.0, node: from });
    while let Some(HeapState { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        if node == to {
            break;
        }
        for next in 0..t {
            let w = graph.weights[node][next];
            if !w.is_finite() || next == node {
                continue;
            }
            let cand = cost + w;
            if cand < dist[next] {
                dist[next] = cand;
                prev[next] = node;
                heap.push(HeapState { cost: cand, node: next });
            }
        }
    }
    if !dist[to].is_finite() {
        return Err(Error::NoPath { from, to });
    }
    let mut nodes = vec![to];
    let mut cur = to;
    while cur != from {
        cur = prev[cur];
        nodes.push(cur);
    }
    nodes.reverse();
    Ok(PathResult { cost: dist[to], nodes })
}

/// Turn a selected path into a full schedule: the corruption-stage nodes are
/// spread uniformly over `[DENOISE_STAGE_END, 1]` at the constant stage
/// noise, preceded by the clean entry at `t = 0` with the noise floor.
pub fn schedule_from_path(
    grid: &CandidateGrid,
    path: &[usize],
    sigma_min: f64,
    sigma_max: f64,
    dataset: &str,
    metric: &str,
    epsilon: f64,
) -> Result<Schedule> {
    if path.len() < 2 {
        return Err(Error::InvalidArgument {
            reason: "path needs at least two nodes".into(),
        });
    }
    let mut entries = vec![ScheduleEntry {
        t: 0.0,
        blur_std: grid.thetas[path[0]],
        sigma: sigma_min,
    }];
    let span = 1.0 - DENOISE_STAGE_END;
    for (j, &node) in path.iter().enumerate() {
        // Pin the endpoint to exactly 1 (float summation may overshoot).
        let t = if j + 1 == path.len() {
            1.0
        } else {
            DENOISE_STAGE_END + span * j as f64 / (path.len() - 1) as f64
        };
        entries.push(ScheduleEntry {
            t,
            blur_std: grid.thetas[node],
            sigma: sigma_max,
        });
    }
    Schedule::new(dataset, metric, epsilon, entries)
}

/// Result of tuning epsilon toward a target path length.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub epsilon: f64,
    pub path: PathResult,
    pub achieved_len: usize,
    /// False when no epsilon attains the requested length exactly; the
    /// closest achievable count is reported instead.
    pub exact: bool,
}

fn path_len_at(dists: &[Vec<f64>], epsilon: f64) -> Option<PathResult> {
    shortest_path(&DistanceGraph::threshold(dists, epsilon)).ok()
}

/// Bisection on epsilon over the sorted observed pairwise distances until the
/// shortest path contains exactly `target_len` nodes, falling back to the
/// closest achievable count. Larger epsilon never lengthens the optimal path
/// on metric grids, which is what makes bisection meaningful; a local scan
/// around the bisection point mops up non-monotone wiggles.
pub fn calibrate_epsilon(dists: &[Vec<f64>], target_len: usize) -> Result<Calibration> {
    let t = dists.len();
    if target_len < 2 || target_len > t {
        return Err(Error::InvalidArgument {
            reason: format!("target path length {target_len} outside [2, {t}]"),
        });
    }
    let mut values: Vec<f64> = (0..t)
        .flat_map(|i| ((i + 1)..t).map(move |j| dists[i][j]))
        .collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    if values.is_empty() {
        return Err(Error::InvalidArgument {
            reason: "degenerate distance matrix".into(),
        });
    }

    let len_at = |eps: f64| path_len_at(dists, eps).map(|p| p.nodes.len());
    // Bisect for the smallest epsilon whose path length is <= target
    // (length shrinks as epsilon grows).
    let (mut lo, mut hi) = (0usize, values.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        match len_at(values[mid]) {
            Some(len) if len <= target_len => hi = mid,
            _ => lo = mid + 1,
        }
    }
    // Scan a window around the bisection point for an exact hit, preferring
    // the smallest epsilon that achieves it.
    let window = 64usize;
    let start = lo.saturating_sub(window);
    let end = (lo + window).min(values.len() - 1);
    let mut best: Option<Calibration> = None;
    for idx in start..=end {
        let eps = values[idx];
        if let Some(path) = path_len_at(dists, eps) {
            let len = path.nodes.len();
            let cand = Calibration {
                epsilon: eps,
                achieved_len: len,
                exact: len == target_len,
                path,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    let d_new = len.abs_diff(target_len);
                    let d_old = b.achieved_len.abs_diff(target_len);
                    d_new < d_old
                }
            };
            if better {
                let found_exact = cand.exact;
                best = Some(cand);
                if found_exact {
                    break;
                }
            }
        }
    }
    best.ok_or(Error::NoPath { from: 0, to: t - 1 })
}

/// Outcome of the MSE-matched baseline schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MseMatched {
    pub schedule: Schedule,
    /// t values where no corruption parameter attains the target ratio; the
    /// parameter was clamped to the range boundary there.
    pub clamped: Vec<f64>,
}

/// Baseline schedule selection: per reference time, bisect over the
/// corruption parameter until the normalized corruption MSE ratio
/// `E||x0 - x_t||^2 / E||x0 - x_1||^2` matches the reference schedule's
/// ratio. Expectations are exact means over the (finite) dataset; the noise
/// contribution `n sigma^2` is analytic.
pub fn mse_matched_schedule(
    reference: &[(f64, f64)],
    data: &[Tensor],
    family: &OperatorFamily,
    theta_min: f64,
    theta_max: f64,
    sigma_min: f64,
    sigma_max: f64,
    dataset: &str,
) -> Result<MseMatched> {
    if reference.len() < 2 || reference[0].0 != 0.0 || reference.last().unwrap().0 != 1.0 {
        return Err(Error::InvalidArgument {
            reason: "reference schedule must span t = 0 to t = 1".into(),
        });
    }
    for pair in reference.windows(2) {
        if pair[1].1 < pair[0].1 {
            return Err(Error::InvalidArgument {
                reason: "reference sigma must be non-decreasing".into(),
            });
        }
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument {
            reason: "dataset must be non-empty".into(),
        });
    }
    let n = family.dim() as f64;

    // Mean squared deterministic distortion at a corruption level.
    let distortion = |theta: f64| -> Result<f64> {
        let op = family.operator_for(theta)?;
        let mut acc = 0.0;
        for x0 in data {
            acc += x0.sub(&op.apply(x0)?).norm_sq();
        }
        Ok(acc / data.len() as f64)
    };
    let lo_val = distortion(theta_min)?;
    let hi_val = distortion(theta_max)?;
    if hi_val <= lo_val {
        return Err(Error::InvalidArgument {
            reason: "corruption family is not increasing over the theta range".into(),
        });
    }

    // Our noise schedule: floor-to-max geometric ramp, then constant.
    let our_schedule = Schedule::three_point(dataset, 0.0, 0.0, sigma_min, sigma_max, DENOISE_STAGE_END)?;
    let our_sigma = |t: f64| our_schedule.sigma_at(t);

    let sigma_ref_1 = reference.last().unwrap().1;
    let denom = hi_val + n * our_sigma(1.0).powi(2);
    let tol = 1e-9 * denom.max(1.0);

    let mut entries = Vec::with_capacity(reference.len());
    let mut clamped = Vec::new();
    for &(t, sigma_ref) in reference {
        let ratio = (sigma_ref * sigma_ref) / (sigma_ref_1 * sigma_ref_1);
        let required = ratio * denom - n * our_sigma(t).powi(2);
        let theta = if required <= lo_val + tol {
            if required < lo_val - tol {
                clamped.push(t);
            }
            theta_min
        } else if required >= hi_val - tol {
            if required > hi_val + tol {
                clamped.push(t);
            }
            theta_max
        } else {
            let (mut a, mut b) = (theta_min, theta_max);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if distortion(mid)? < required {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            0.5 * (a + b)
        };
        entries.push(ScheduleEntry {
            t,
            blur_std: theta,
            sigma: our_sigma(t),
        });
    }
    // Bisection noise on flat reference segments can produce microscopic
    // decreases; schedules require monotone parameters.
    for i in 1..entries.len() {
        if entries[i].blur_std < entries[i - 1].blur_std {
            entries[i].blur_std = entries[i - 1].blur_std;
        }
    }
    let schedule = Schedule::new(dataset, "mse-matched", 0.0, entries)?;
    Ok(MseMatched { schedule, clamped })
}
