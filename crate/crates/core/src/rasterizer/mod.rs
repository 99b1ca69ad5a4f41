//! Tile-based differentiable Gaussian splatting on the CPU.
//!
//! Forward: project every Gaussian (EWA / local-affine approximation), sort
//! globally front-to-back by `(depth, index)`, bin into 16x16 tiles and
//! alpha-composite each pixel. Backward replays each pixel's contribution
//! list and walks it back-to-front.
//!
//! The footprint used for binning is the exact ellipse outside of which a
//! splat's alpha drops below 1/255, so tiling and culling never change the
//! composited result relative to a per-pixel loop over all Gaussians.

mod backward;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussians::GaussianCloud;
use crate::geometry::CameraView;
use crate::pixels::{Image, Plane};
use crate::sh;

pub use backward::{render_backward, GradientBuffer};

pub const TILE_SIZE: usize = 8;
/// Added to the projected 2D covariance diagonal (pixels squared).
pub const COV2D_DILATION: f64 = 0.3;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const ALPHA_MAX: f64 = 0.99;
pub const NEAR_PLANE: f64 = 0.2;
/// The projection Jacobian is evaluated with `x/z`, `y/z` clamped to this
/// multiple of the image half-extent, so splats far outside the frustum do
/// not blow up.
pub const FRUSTUM_CLAMP: f64 = 1.3;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("gradient buffer shape {got:?} does not match forward pass {expected:?}")]
    MismatchedForward { expected: (usize, usize), got: (usize, usize) },
    #[error("forward pass was computed for {expected} Gaussians, cloud has {got}")]
    CloudChanged { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// SH degree used for color (clamped to the cloud's storage degree).
    pub sh_degree: usize,
    pub background: [f64; 3],
    /// Rasterize tiles on the rayon pool. Results are identical either way.
    pub parallel: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { sh_degree: sh::MAX_DEGREE, background: [0.0; 3], parallel: true }
    }
}

/// A Gaussian after projection into a particular view.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    /// Inverse 2D covariance as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Channels whose raw SH value was clamped to `[0, 1]`.
    pub color_clamped: [bool; 3],
    pub depth: f64,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)`.
    pub bbox: (usize, usize, usize, usize),
    pub p_cam: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// `x/z`, `y/z` as used in the Jacobian, and whether each was clamped.
    pub ray: [f64; 2],
    pub ray_clamped: [bool; 2],
    pub view_dir: Vector3<f64>,
    pub view_dist: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub gaussian_count: usize,
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub parallel: bool,
    /// Splats in front-to-back order.
    pub splats: Vec<Splat>,
    /// Per tile, indices into `splats` in front-to-back order.
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub world_to_cam: Matrix3<f64>,
}

/// Rendered color, alpha-normalized expected depth and accumulated opacity.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    /// Zero wherever `alpha` is zero.
    pub depth: Plane,
    pub alpha: Plane,
    pub(crate) cache: ForwardCache,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Number of Gaussians that survived projection and culling.
    pub fn visible_count(&self) -> usize {
        self.cache.splats.len()
    }

    /// Indices of the Gaussians that survived projection and culling.
    pub fn visible_indices(&self) -> Vec<usize> {
        self.cache.splats.iter().map(|s| s.index).collect()
    }
}

fn project_gaussian(cloud: &GaussianCloud, i: usize, view: &CameraView, w2c: &Matrix3<f64>, t_w2c: &Vector3<f64>, degree: usize) -> Option<Splat> {
    let k = &view.intrinsics;
    let mean = cloud.mean(i);
    let p = w2c * mean + t_w2c;
    if p.z <= NEAR_PLANE {
        return None;
    }
    let opacity = cloud.opacity(i);
    if opacity * 255.0 <= 1.0 {
        return None;
    }
    let iz = 1.0 / p.z;
    let lim_x = FRUSTUM_CLAMP * k.cx.max(k.width as f64 - k.cx) / k.fx;
    let lim_y = FRUSTUM_CLAMP * k.cy.max(k.height as f64 - k.cy) / k.fy;
    let (rx, ry) = (p.x * iz, p.y * iz);
    let ray = [rx.clamp(-lim_x, lim_x), ry.clamp(-lim_y, lim_y)];
    let ray_clamped = [ray[0] != rx, ray[1] != ry];
    let jacobian = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * ray[0] * iz, 0.0, k.fy * iz, -k.fy * ray[1] * iz);
    let cov_cam = w2c * cloud.covariance(i) * w2c.transpose();
    let mut cov2d: Matrix2<f64> = jacobian * cov_cam * jacobian.transpose();
    cov2d[(0, 0)] += COV2D_DILATION;
    cov2d[(1, 1)] += COV2D_DILATION;
    let (a, b, c) = (cov2d[(0, 0)], 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]), cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mean2d = Vector2::new(k.fx * p.x * iz + k.cx, k.fy * p.y * iz + k.cy);

    // Mahalanobis radius beyond which alpha < 1/255; one pixel of slack.
    let q_max = 2.0 * (255.0 * opacity).ln();
    let ex = (q_max * a).sqrt() + 1.0;
    let ey = (q_max * c).sqrt() + 1.0;
    let (w, h) = (k.width as f64, k.height as f64);
    let x0 = (mean2d.x - ex - 0.5).ceil().max(0.0);
    let x1 = (mean2d.x + ex - 0.5).floor().min(w - 1.0);
    let y0 = (mean2d.y - ey - 0.5).ceil().max(0.0);
    let y1 = (mean2d.y + ey - 0.5).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }

    let to_mean = mean - view.pose.center();
    let view_dist = to_mean.norm();
    let view_dir = if view_dist > 0.0 { to_mean / view_dist } else { Vector3::z() };
    let raw = sh::eval_raw(cloud.sh_coeffs(i), degree, &view_dir);
    let color_clamped = raw.map(|v| !(0.0..=1.0).contains(&v));
    let color = raw.map(|v| v.clamp(0.0, 1.0));

    Some(Splat {
        index: i,
        mean2d,
        conic,
        opacity,
        color,
        color_clamped,
        depth: p.z,
        bbox: (x0 as usize, x1 as usize, y0 as usize, y1 as usize),
        p_cam: p,
        cov_cam,
        jacobian,
        ray,
        ray_clamped,
        view_dir,
        view_dist,
    })
}

/// Gaussian falloff alpha of `s` at the center of pixel `(x, y)`, before the
/// `[ALPHA_MIN, ALPHA_MAX]` rules. Returns `(alpha, exp term, dx, dy)`.
/// The part of a splat the per-pixel loops read, packed contiguously per tile.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelSplat {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
    pub bbox: [u32; 4],
    /// Quadratic-form value beyond which alpha is certainly below 1/255.
    pub q_cut: f64,
}

impl From<&Splat> for PixelSplat {
    fn from(s: &Splat) -> Self {
        let (x0, x1, y0, y1) = s.bbox;
        Self {
            mean2d: [s.mean2d.x, s.mean2d.y],
            conic: s.conic,
            opacity: s.opacity,
            color: s.color,
            depth: s.depth,
            bbox: [x0 as u32, x1 as u32, y0 as u32, y1 as u32],
            q_cut: 2.0 * (255.0 * s.opacity).ln() + 1e-6,
        }
    }
}

pub(crate) fn tile_splats(cache: &ForwardCache, tile: usize) -> Vec<PixelSplat> {
    cache.tiles[tile].iter().map(|&si| PixelSplat::from(&cache.splats[si as usize])).collect()
}

/// `(alpha, gaussian, dx, dy)` of a splat at the center of pixel `(x, y)`,
/// or `None` when alpha is below 1/255.
#[inline]
pub(crate) fn splat_alpha(s: &PixelSplat, x: usize, y: usize) -> Option<(f64, f64, f64, f64)> {
    let dx = x as f64 + 0.5 - s.mean2d[0];
    let dy = y as f64 + 0.5 - s.mean2d[1];
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if q > s.q_cut {
        return None;
    }
    let g = (-0.5 * q).exp();
    let alpha = s.opacity * g;
    (alpha >= ALPHA_MIN).then_some((alpha, g, dx, dy))
}

#[inline]
pub(crate) fn in_bbox(s: &PixelSplat, x: usize, y: usize) -> bool {
    let (x, y) = (x as u32, y as u32);
    x >= s.bbox[0] && x <= s.bbox[1] && y >= s.bbox[2] && y <= s.bbox[3]
}

/// Renders color, depth and alpha of `cloud` seen from `view`.
pub fn render(cloud: &GaussianCloud, view: &CameraView, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (view.width(), view.height());
    let (w2c, t_w2c) = view.pose.world_to_camera();
    let degree = settings.sh_degree.min(cloud.sh_degree());

    let project_one = |i| project_gaussian(cloud, i, view, &w2c, &t_w2c, degree);
    let mut splats: Vec<Splat> = if settings.parallel {
        (0..cloud.len()).into_par_iter().filter_map(project_one).collect()
    } else {
        (0..cloud.len()).filter_map(project_one).collect()
    };
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = s.bbox;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }

    let cache = ForwardCache {
        gaussian_count: cloud.len(),
        sh_degree: degree,
        background: settings.background,
        parallel: settings.parallel,
        splats,
        tiles,
        tiles_x,
        tiles_y,
        world_to_cam: w2c,
    };

    let shade_tile = |t: usize| -> Vec<(usize, [f64; 3], f64, f64)> {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let list = tile_splats(&cache, t);
        let mut out = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
        for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
            for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                let mut trans = 1.0;
                let mut rgb = [0.0; 3];
                let mut depth = 0.0;
                for s in &list {
                    if !in_bbox(s, x, y) {
                        continue;
                    }
                    let Some((alpha, _, _, _)) = splat_alpha(s, x, y) else { continue };
                    let alpha = alpha.min(ALPHA_MAX);
                    let wgt = alpha * trans;
                    for c in 0..3 {
                        rgb[c] += s.color[c] * wgt;
                    }
                    depth += s.depth * wgt;
                    trans *= 1.0 - alpha;
                }
                for c in 0..3 {
                    rgb[c] += trans * settings.background[c];
                }
                let acc = 1.0 - trans;
                let d = if acc > 0.0 { depth / acc } else { 0.0 };
                out.push((y * w + x, rgb, d, acc));
            }
        }
        out
    };
    let per_tile: Vec<_> = if settings.parallel {
        (0..tiles_x * tiles_y).into_par_iter().map(shade_tile).collect()
    } else {
        (0..tiles_x * tiles_y).map(shade_tile).collect()
    };

    let mut color = Image::new(w, h);
    let mut depth = Plane::new(w, h);
    let mut alpha = Plane::new(w, h);
    for (p, rgb, d, a) in per_tile.into_iter().flatten() {
        color.data_mut()[3 * p..3 * p + 3].copy_from_slice(&rgb);
        depth.data_mut()[p] = d;
        alpha.data_mut()[p] = a;
    }
    RenderOutput { color, depth, alpha, cache }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{logit, Gaussian};
    use crate::geometry::{Intrinsics, Pose};

    fn view(w: usize, h: usize) -> CameraView {
        CameraView::new(
            Intrinsics::new(40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
            Pose::identity(),
        )
        .unwrap()
    }

    fn gaussian(mean: [f32; 3], scale: f32, opacity: f64, rgb: [f64; 3]) -> Gaussian {
        let mut sh = vec![0.0; 3];
        for c in 0..3 {
            sh[c] = sh::rgb_to_dc(rgb[c]) as f32;
        }
        Gaussian {
            mean,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity) as f32,
            sh,
        }
    }

    #[test]
    fn single_splat_peaks_at_projected_mean() {
        let mut cloud = GaussianCloud::new(0).unwrap();
        cloud.push(&gaussian([0.0, 0.0, 4.0], 0.2, 0.999, [1.0, 1.0, 1.0]));
        let out = render(&cloud, &view(32, 32), &RenderSettings::default());
        let mut best = (0, 0, -1.0);
        for y in 0..32 {
            for x in 0..32 {
                let v = out.color.get(x, y)[0];
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        // Projected mean (16, 16) is the corner shared by pixels 15 and 16.
        assert!((best.0 as f64 + 0.5 - 16.0).abs() <= 0.5 && (best.1 as f64 + 0.5 - 16.0).abs() <= 0.5);
        // Monotone decay along the row through the peak.
        let row: Vec<f64> = (16..32).map(|x| out.color.get(x, 16)[0]).collect();
        assert!(row.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn near_opaque_occluder_wins() {
        let mut cloud = GaussianCloud::new(0).unwrap();
        cloud.push(&gaussian([0.0, 0.0, 2.0], 0.5, 0.2, [0.0, 0.0, 1.0]));
        cloud.push(&gaussian([0.0, 0.0, 1.0], 0.5, 0.9999, [1.0, 0.0, 0.0]));
        let out = render(&cloud, &view(16, 16), &RenderSettings::default());
        let c = out.color.get(8, 8);
        assert!(c[0] > 0.98 && c[2] < 0.01, "{c:?}");
        assert!((out.depth.get(8, 8) - 1.0).abs() < 0.02);
    }

    #[test]
    fn empty_frustum_renders_background_free_zeros() {
        let mut cloud = GaussianCloud::new(0).unwrap();
        cloud.push(&gaussian([0.0, 0.0, -3.0], 0.5, 0.9, [1.0, 1.0, 1.0]));
        let out = render(&cloud, &view(8, 8), &RenderSettings::default());
        assert!(out.color.data().iter().all(|v| *v == 0.0));
        assert!(out.alpha.data().iter().all(|v| *v == 0.0));
        assert!(out.depth.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.visible_count(), 0);
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        let mut cloud = GaussianCloud::new(0).unwrap();
        for i in 0..40 {
            let f = i as f32;
            cloud.push(&gaussian([(f * 0.37).sin(), (f * 0.71).cos() * 0.5, 2.0 + f * 0.05], 0.1, 0.7, [0.3, 0.6, 0.9]));
        }
        let v = view(40, 35);
        let a = render(&cloud, &v, &RenderSettings { parallel: true, ..Default::default() });
        let b = render(&cloud, &v, &RenderSettings { parallel: false, ..Default::default() });
        assert_eq!(a.color, b.color);
        assert_eq!(a.depth, b.depth);
    }
}
