//! Columnar storage for the Gaussian scene representation, LiDAR-based
//! initialization and adaptive density control.

use std::collections::HashMap;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lidar::ColoredPointCloud;
use crate::sh;

#[derive(Debug, Error, PartialEq)]
pub enum GaussianError {
    #[error("cannot initialize from an empty point cloud")]
    EmptyCloud,
    #[error("unsupported SH degree {0} (max {max})", max = sh::MAX_DEGREE)]
    UnsupportedDegree(usize),
    #[error("opacity must lie in (0, 1), got {0}")]
    InvalidOpacity(f64),
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A single Gaussian in parameter space (scale in log space, opacity as a
/// logit, quaternion `(w, x, y, z)` not necessarily normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: [f32; 3],
    pub log_scale: [f32; 3],
    pub rotation: [f32; 4],
    pub opacity_logit: f32,
    pub sh: Vec<f32>,
}

impl Gaussian {
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_from(&self.log_scale, &self.rotation)
    }
}

/// Normalized rotation matrix of a raw `(w, x, y, z)` quaternion.
pub fn rotation_from(q: &[f32; 4]) -> Matrix3<f64> {
    let q = Quaternion::new(f64::from(q[0]), f64::from(q[1]), f64::from(q[2]), f64::from(q[3]));
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// `R S S^T R^T` from log-scales and a raw quaternion.
pub fn covariance_from(log_scale: &[f32; 3], rotation: &[f32; 4]) -> Matrix3<f64> {
    let r = rotation_from(rotation);
    let s = Matrix3::from_diagonal(&Vector3::from(log_scale.map(|v| f64::from(v).exp())));
    let m = r * s;
    m * m.transpose()
}

/// Struct-of-arrays Gaussian cloud. SH coefficients are stored per Gaussian
/// as `coeff_count(sh_degree) * 3` floats laid out `[k * 3 + channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    sh_degree: usize,
    pub means: Vec<[f32; 3]>,
    pub log_scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub opacity_logits: Vec<f32>,
    pub sh: Vec<f32>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Result<Self, GaussianError> {
        if sh_degree > sh::MAX_DEGREE {
            return Err(GaussianError::UnsupportedDegree(sh_degree));
        }
        Ok(Self {
            sh_degree,
            means: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        })
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn sh_stride(&self) -> usize {
        sh::coeff_count(self.sh_degree) * 3
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Every column has `len()` entries.
    pub fn is_consistent(&self) -> bool {
        let n = self.len();
        self.log_scales.len() == n
            && self.rotations.len() == n
            && self.opacity_logits.len() == n
            && self.sh.len() == n * self.sh_stride()
    }

    /// Appends a Gaussian; `g.sh` is truncated or zero-padded to the stride.
    pub fn push(&mut self, g: &Gaussian) {
        self.means.push(g.mean);
        self.log_scales.push(g.log_scale);
        self.rotations.push(g.rotation);
        self.opacity_logits.push(g.opacity_logit);
        let stride = self.sh_stride();
        let start = self.sh.len();
        self.sh.extend(g.sh.iter().take(stride));
        self.sh.resize(start + stride, 0.0);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            mean: self.means[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh_coeffs(i).to_vec(),
        }
    }

    pub fn sh_coeffs(&self, i: usize) -> &[f32] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn sh_coeffs_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.sh_stride();
        &mut self.sh[i * s..(i + 1) * s]
    }

    pub fn mean(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.means[i].map(f64::from))
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scales[i].map(|v| f64::from(v).exp()))
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(f64::from(self.opacity_logits[i]))
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        covariance_from(&self.log_scales[i], &self.rotations[i])
    }

    /// Keeps the Gaussians whose flag is `true`, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        let stride = self.sh_stride();
        let mut it = keep.iter();
        self.means.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.log_scales.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rotations.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.opacity_logits.retain(|_| *it.next().unwrap());
        let mut sh = Vec::with_capacity(self.sh.len());
        for (i, k) in keep.iter().enumerate() {
            if *k {
                sh.extend_from_slice(&self.sh[i * stride..(i + 1) * stride]);
            }
        }
        self.sh = sh;
    }

    /// Iterator over every stored scalar parameter.
    pub fn all_params(&self) -> impl Iterator<Item = f32> + '_ {
        self.means
            .iter()
            .flatten()
            .chain(self.log_scales.iter().flatten())
            .chain(self.rotations.iter().flatten())
            .chain(self.opacity_logits.iter())
            .chain(self.sh.iter())
            .copied()
    }
}

/// One Gaussian per point: mean at the point, DC color equal to the point
/// color, isotropic scale from the mean distance to the 3 nearest
/// neighbours, identity rotation and uniform opacity `opacity0`.
pub fn init_from_points(cloud: &ColoredPointCloud, opacity0: f64, sh_degree: usize) -> Result<GaussianCloud, GaussianError> {
    if cloud.is_empty() {
        return Err(GaussianError::EmptyCloud);
    }
    if !(opacity0 > 0.0 && opacity0 < 1.0) {
        return Err(GaussianError::InvalidOpacity(opacity0));
    }
    let mut out = GaussianCloud::new(sh_degree)?;
    let positions: Vec<Vector3<f64>> = cloud.positions().copied().collect();
    let spacing = mean_knn_distance(&positions, 3);
    let stride = out.sh_stride();
    let op = logit(opacity0) as f32;
    for (p, d) in cloud.points.iter().zip(spacing) {
        // Coincident points would otherwise give log(0).
        let s = (d.max(1e-7)).ln() as f32;
        let mut coeffs = vec![0.0f32; stride];
        for c in 0..3 {
            coeffs[c] = sh::rgb_to_dc(p.color[c]) as f32;
        }
        out.push(&Gaussian {
            mean: p.position.map(|v| v as f32).into(),
            log_scale: [s; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: op,
            sh: coeffs,
        });
    }
    Ok(out)
}

/// Mean Euclidean distance from each point to its `k` nearest other points
/// (fewer when the cloud is smaller). Single-point clouds get 1.0.
pub fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let k = k.min(n - 1);
    let (lo, hi) = points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    );
    let extent = (hi - lo).max().max(1e-9);
    // Roughly a handful of points per occupied cell.
    let cell = (extent / (n as f64).cbrt()).max(1e-9) * 1.5;
    let key = |p: &Vector3<f64>| -> [i64; 3] {
        let q = (p - lo) / cell;
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    let max_ring = ((extent / cell).ceil() as i64) + 1;

    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut best: Vec<f64> = Vec::new();
            for r in 0..=max_ring {
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            if let Some(ids) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                                for &j in ids {
                                    if j != i {
                                        best.push((points[j] - p).norm());
                                    }
                                }
                            }
                        }
                    }
                }
                if best.len() >= k {
                    best.sort_unstable_by(|a, b| a.total_cmp(b));
                    // Anything outside ring r is at least r * cell away.
                    if best[k - 1] <= r as f64 * cell {
                        break;
                    }
                }
            }
            best.sort_unstable_by(|a, b| a.total_cmp(b));
            best.iter().take(k).sum::<f64>() / k as f64
        })
        .collect()
}

/// Accumulated screen-space positional gradient norms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { accum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum.is_empty()
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / f64::from(self.count[i])
        }
    }

    pub fn reset(&mut self, n: usize) {
        self.accum.clear();
        self.accum.resize(n, 0.0);
        self.count.clear();
        self.count.resize(n, 0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub enabled: bool,
    /// Threshold on the mean NDC-space positional gradient norm.
    pub grad_threshold: f64,
    pub min_opacity: f64,
    /// Split instead of clone once the largest scale exceeds this fraction
    /// of the scene extent.
    pub percent_dense: f64,
    pub interval: usize,
    pub from_iter: usize,
    pub until_iter: usize,
    pub opacity_reset_interval: usize,
    /// Densification stops adding Gaussians once the cloud reaches this size.
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grad_threshold: 2e-4,
            min_opacity: 0.005,
            percent_dense: 0.01,
            interval: 100,
            from_iter: 500,
            until_iter: 15_000,
            opacity_reset_interval: 3000,
            max_gaussians: 1_000_000,
        }
    }
}

/// Result of a density-control pass. `origin[i]` is the pre-pass index of
/// output Gaussian `i`, or `None` when it was newly created.
#[derive(Debug, Clone)]
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;

/// Clone small / split large high-gradient Gaussians, then prune transparent
/// ones. Split children sample their means from the parent distribution and
/// divide the parent scale by 1.6.
pub fn densify_and_prune<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    stats: &GradStats,
    cfg: &DensifyConfig,
    scene_extent: f64,
    rng: &mut R,
) -> DensifyOutcome {
    assert_eq!(stats.len(), cloud.len(), "gradient statistics out of sync with cloud");
    let n = cloud.len();
    let mut out = cloud.clone();
    let mut origin: Vec<Option<usize>> = (0..n).map(Some).collect();
    let mut remove = vec![false; n];
    let (mut cloned, mut split) = (0, 0);
    let size_limit = cfg.percent_dense * scene_extent;
    let mut budget = cfg.max_gaussians.saturating_sub(n);

    for i in 0..n {
        if stats.mean(i) < cfg.grad_threshold || budget == 0 {
            continue;
        }
        let scale = cloud.scale(i);
        if scale.max() <= size_limit {
            out.push(&cloud.get(i));
            origin.push(None);
            cloned += 1;
            budget -= 1;
        } else {
            let parent = cloud.get(i);
            let r = rotation_from(&parent.rotation);
            let mu = cloud.mean(i);
            let new_log_scale = scale.map(|s| (s / SPLIT_SCALE_DIVISOR).ln() as f32);
            for _ in 0..2 {
                let z = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let m = mu + r * scale.component_mul(&z);
                let mut child = parent.clone();
                child.mean = m.map(|v| v as f32).into();
                child.log_scale = new_log_scale.into();
                out.push(&child);
                origin.push(None);
            }
            remove[i] = true;
            split += 1;
            budget = budget.saturating_sub(1);
        }
    }

    let keep: Vec<bool> = (0..out.len())
        .map(|j| {
            let parent_removed = j < n && remove[j];
            !parent_removed && out.opacity(j) >= cfg.min_opacity
        })
        .collect();
    let pruned = keep.iter().filter(|k| !**k).count() - split;
    out.retain_mask(&keep);
    let mut k = keep.iter();
    origin.retain(|_| *k.next().unwrap());
    DensifyOutcome { cloud: out, origin, cloned, split, pruned }
}

/// Caps every opacity at `max_opacity` (standard periodic reset).
pub fn reset_opacity(cloud: &mut GaussianCloud, max_opacity: f64) {
    let cap = logit(max_opacity) as f32;
    for o in &mut cloud.opacity_logits {
        *o = o.min(cap);
    }
}
