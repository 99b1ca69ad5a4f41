use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::{in_bbox, splat_alpha, tile_splats, RenderError, RenderOutput, Splat, ALPHA_MAX, TILE_SIZE};
use crate::gaussians::GaussianCloud;
use crate::geometry::CameraView;
use crate::pixels::{Image, Plane};
use crate::sh;

/// Per-Gaussian partial derivatives of a scalar loss, in parameter space
/// (log-scales, raw quaternion, opacity logit, SH coefficients).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub means: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    /// Norm of the gradient w.r.t. the projected mean in NDC units, for
    /// densification statistics. Zero for Gaussians not visible.
    pub screen_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl GradientBuffer {
    pub fn zeros(n: usize, sh_stride: usize) -> Self {
        Self {
            means: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; n * sh_stride],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// `self += weight * other` on the parameter gradients; visibility is
    /// OR-ed and screen-space norms are added.
    pub fn add_scaled(&mut self, other: &GradientBuffer, weight: f64) {
        assert_eq!(self.len(), other.len());
        let axpy = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += weight * y);
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            axpy(a, b);
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            axpy(a, b);
        }
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            axpy(a, b);
        }
        axpy(&mut self.opacity_logits, &other.opacity_logits);
        axpy(&mut self.sh, &other.sh);
        for (a, b) in self.screen_grad_norm.iter_mut().zip(&other.screen_grad_norm) {
            *a += weight * b;
        }
        for (a, b) in self.visible.iter_mut().zip(&other.visible) {
            *a |= *b;
        }
    }

    /// Multiplies every parameter gradient (and screen norm) by `weight`.
    pub fn scale(&mut self, weight: f64) {
        let mul = |xs: &mut [f64]| xs.iter_mut().for_each(|x| *x *= weight);
        self.means.iter_mut().for_each(|a| mul(a));
        self.log_scales.iter_mut().for_each(|a| mul(a));
        self.rotations.iter_mut().for_each(|a| mul(a));
        mul(&mut self.opacity_logits);
        mul(&mut self.sh);
        mul(&mut self.screen_grad_norm);
    }

    pub fn iter_params(&self) -> impl Iterator<Item = f64> + '_ {
        self.means
            .iter()
            .flatten()
            .chain(self.log_scales.iter().flatten())
            .chain(self.rotations.iter().flatten())
            .chain(self.opacity_logits.iter())
            .chain(self.sh.iter())
            .copied()
    }

    pub fn is_finite(&self) -> bool {
        self.iter_params().all(f64::is_finite)
    }
}

// Partials w.r.t. one splat's screen-space quantities.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    trans: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Back-propagates `d_color` (H x W x 3) and `d_depth` (H x W) through the
/// forward pass recorded in `output`.
pub fn render_backward(
    cloud: &GaussianCloud,
    view: &CameraView,
    output: &RenderOutput,
    d_color: &Image,
    d_depth: &Plane,
) -> Result<GradientBuffer, RenderError> {
    let (w, h) = (output.width(), output.height());
    if d_color.dims() != (w, h) {
        return Err(RenderError::MismatchedForward { expected: (w, h), got: d_color.dims() });
    }
    if (d_depth.width(), d_depth.height()) != (w, h) {
        return Err(RenderError::MismatchedForward { expected: (w, h), got: (d_depth.width(), d_depth.height()) });
    }
    let cache = &output.cache;
    if cache.gaussian_count != cloud.len() {
        return Err(RenderError::CloudChanged { expected: cache.gaussian_count, got: cloud.len() });
    }
    let bg = cache.background;

    let tile_pass = |t: usize| -> Vec<SplatGrad> {
        let (tx, ty) = (t % cache.tiles_x, t / cache.tiles_x);
        let list = tile_splats(cache, t);
        let mut grads = vec![SplatGrad::default(); list.len()];
        if list.is_empty() {
            return grads;
        }
        let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
        for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
            for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
                let p = y * w + x;
                let gc = [d_color.data()[3 * p], d_color.data()[3 * p + 1], d_color.data()[3 * p + 2]];
                let gd = d_depth.data()[p];
                if gc == [0.0; 3] && gd == 0.0 {
                    continue;
                }
                contribs.clear();
                let mut trans = 1.0;
                for (slot, s) in list.iter().enumerate() {
                    if !in_bbox(s, x, y) {
                        continue;
                    }
                    let Some((raw, gauss, dx, dy)) = splat_alpha(s, x, y) else { continue };
                    let alpha = raw.min(ALPHA_MAX);
                    contribs.push(Contribution { slot, alpha, gauss, trans, dx, dy, clamped: raw > ALPHA_MAX });
                    trans *= 1.0 - alpha;
                }
                if contribs.is_empty() {
                    continue;
                }
                let t_final = trans;
                let acc = 1.0 - t_final;
                let depth = output.depth.data()[p];
                // depth = numerator / acc
                let (g_num, g_acc) = if acc > 0.0 { (gd / acc, -gd * depth / acc) } else { (0.0, 0.0) };

                let mut suffix_c = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final];
                let mut suffix_z = 0.0;
                for c in contribs.iter().rev() {
                    let s = &list[c.slot];
                    let one_minus = 1.0 - c.alpha;
                    let wgt = c.alpha * c.trans;
                    let g = &mut grads[c.slot];
                    let mut g_alpha = 0.0;
                    for k in 0..3 {
                        g.color[k] += gc[k] * wgt;
                        g_alpha += gc[k] * (c.trans * s.color[k] - suffix_c[k] / one_minus);
                    }
                    g.depth += g_num * wgt;
                    g_alpha += g_num * (c.trans * s.depth - suffix_z / one_minus);
                    g_alpha += g_acc * t_final / one_minus;

                    for k in 0..3 {
                        suffix_c[k] += s.color[k] * wgt;
                    }
                    suffix_z += s.depth * wgt;

                    if c.clamped {
                        continue;
                    }
                    g.opacity += g_alpha * c.gauss;
                    // alpha = o * exp(-q / 2)
                    let g_q = -0.5 * g_alpha * s.opacity * c.gauss;
                    let [ca, cb, cc] = s.conic;
                    g.conic[0] += g_q * c.dx * c.dx;
                    g.conic[1] += g_q * 2.0 * c.dx * c.dy;
                    g.conic[2] += g_q * c.dy * c.dy;
                    // dx = px - u
                    g.mean2d[0] -= g_q * 2.0 * (ca * c.dx + cb * c.dy);
                    g.mean2d[1] -= g_q * 2.0 * (cb * c.dx + cc * c.dy);
                }
            }
        }
        grads
    };

    let n_tiles = cache.tiles_x * cache.tiles_y;
    let per_tile: Vec<Vec<SplatGrad>> = if cache.parallel {
        (0..n_tiles).into_par_iter().map(tile_pass).collect()
    } else {
        (0..n_tiles).map(tile_pass).collect()
    };

    // Fixed tile order keeps the reduction independent of scheduling.
    let mut splat_grads = vec![SplatGrad::default(); cache.splats.len()];
    for (t, grads) in per_tile.iter().enumerate() {
        for (slot, g) in grads.iter().enumerate() {
            splat_grads[cache.tiles[t][slot] as usize].add(g);
        }
    }

    let stride = cloud.sh_stride();
    let mut out = GradientBuffer::zeros(cloud.len(), stride);
    let chain = |(s, g): (&Splat, &SplatGrad)| chain_to_params(cloud, view, &cache.world_to_cam, cache.sh_degree, s, g);
    let per_splat: Vec<ParamGrad> = if cache.parallel {
        cache.splats.par_iter().zip(splat_grads.par_iter()).map(chain).collect()
    } else {
        cache.splats.iter().zip(splat_grads.iter()).map(chain).collect()
    };
    for (s, pg) in cache.splats.iter().zip(per_splat) {
        let i = s.index;
        out.means[i] = pg.mean;
        out.log_scales[i] = pg.log_scale;
        out.rotations[i] = pg.rotation;
        out.opacity_logits[i] = pg.opacity_logit;
        out.sh[i * stride..(i + 1) * stride].copy_from_slice(&pg.sh);
        out.screen_grad_norm[i] = pg.screen_norm;
        out.visible[i] = true;
    }
    Ok(out)
}

struct ParamGrad {
    mean: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    opacity_logit: f64,
    sh: Vec<f64>,
    screen_norm: f64,
}

fn chain_to_params(
    cloud: &GaussianCloud,
    view: &CameraView,
    w2c: &Matrix3<f64>,
    degree: usize,
    s: &Splat,
    g: &SplatGrad,
) -> ParamGrad {
    let k = &view.intrinsics;
    let i = s.index;

    // Conic = inverse of the dilated 2D covariance.
    let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov2d = -(conic * g_conic * conic);

    // cov2d = J cov_cam J^T + dilation
    let jac: &Matrix2x3<f64> = &s.jacobian;
    let g_cov_cam: Matrix3<f64> = jac.transpose() * g_cov2d * jac;
    let g_jac: Matrix2x3<f64> = 2.0 * g_cov2d * jac * s.cov_cam;

    // cov_cam = W cov W^T
    let g_cov = w2c.transpose() * g_cov_cam * w2c;

    // cov = M M^T, M = R S
    let q_raw = cloud.rotations[i].map(f64::from);
    let q_norm = (q_raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
    let [qw, qx, qy, qz] = q_raw.map(|v| v / q_norm);
    let rot = Matrix3::new(
        1.0 - 2.0 * (qy * qy + qz * qz),
        2.0 * (qx * qy - qw * qz),
        2.0 * (qx * qz + qw * qy),
        2.0 * (qx * qy + qw * qz),
        1.0 - 2.0 * (qx * qx + qz * qz),
        2.0 * (qy * qz - qw * qx),
        2.0 * (qx * qz - qw * qy),
        2.0 * (qy * qz + qw * qx),
        1.0 - 2.0 * (qx * qx + qy * qy),
    );
    let scale = cloud.scale(i);
    let m = rot * Matrix3::from_diagonal(&scale);
    let g_m = 2.0 * g_cov * m;
    let mut log_scale = [0.0; 3];
    let mut g_rot = Matrix3::zeros();
    for j in 0..3 {
        let mut gs = 0.0;
        for r in 0..3 {
            gs += g_m[(r, j)] * rot[(r, j)];
            g_rot[(r, j)] = g_m[(r, j)] * scale[j];
        }
        log_scale[j] = gs * scale[j];
    }
    let gr = |r: usize, c: usize| g_rot[(r, c)];
    let g_qn = [
        2.0 * (-qz * gr(0, 1) + qy * gr(0, 2) + qz * gr(1, 0) - qx * gr(1, 2) - qy * gr(2, 0) + qx * gr(2, 1)),
        2.0 * (qy * gr(0, 1) + qz * gr(0, 2) + qy * gr(1, 0) - 2.0 * qx * gr(1, 1) - qw * gr(1, 2) + qz * gr(2, 0)
            + qw * gr(2, 1)
            - 2.0 * qx * gr(2, 2)),
        2.0 * (-2.0 * qy * gr(0, 0) + qx * gr(0, 1) + qw * gr(0, 2) + qx * gr(1, 0) + qz * gr(1, 2) - qw * gr(2, 0)
            + qz * gr(2, 1)
            - 2.0 * qy * gr(2, 2)),
        2.0 * (-2.0 * qz * gr(0, 0) - qw * gr(0, 1) + qx * gr(0, 2) + qw * gr(1, 0) - 2.0 * qz * gr(1, 1)
            + qy * gr(1, 2)
            + qx * gr(2, 0)
            + qy * gr(2, 1)),
    ];
    let qn = [qw, qx, qy, qz];
    let dot: f64 = (0..4).map(|j| qn[j] * g_qn[j]).sum();
    let rotation = [0, 1, 2, 3].map(|j| (g_qn[j] - qn[j] * dot) / q_norm);

    // Camera-space position: through u, v, the Jacobian and the depth.
    let p = s.p_cam;
    let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
    let [gu, gv] = g.mean2d;
    // A clamped ray component is constant in x (or y); J's last column then
    // only scales with 1/z instead of 1/z^2.
    let free = s.ray_clamped.map(|c| if c { 0.0 } else { 1.0 });
    let mut g_p = Vector3::new(
        gu * k.fx * iz - free[0] * g_jac[(0, 2)] * k.fx * iz2,
        gv * k.fy * iz - free[1] * g_jac[(1, 2)] * k.fy * iz2,
        0.0,
    );
    g_p.z = -gu * k.fx * p.x * iz2 - gv * k.fy * p.y * iz2 - g_jac[(0, 0)] * k.fx * iz2
        + g_jac[(0, 2)] * (1.0 + free[0]) * k.fx * s.ray[0] * iz2
        - g_jac[(1, 1)] * k.fy * iz2
        + g_jac[(1, 2)] * (1.0 + free[1]) * k.fy * s.ray[1] * iz2
        + g.depth;
    let mut g_mean = w2c.transpose() * g_p;

    // Color: SH coefficients and the view direction.
    let stride = cloud.sh_stride();
    let mut g_sh = vec![0.0; stride];
    let g_raw: [f64; 3] = [0, 1, 2].map(|c| if s.color_clamped[c] { 0.0 } else { g.color[c] });
    let count = sh::coeff_count(degree);
    let basis = sh::basis(degree, &s.view_dir);
    for kk in 0..count {
        for c in 0..3 {
            g_sh[kk * 3 + c] = basis[kk] * g_raw[c];
        }
    }
    if degree > 0 && s.view_dist > 0.0 {
        let coeffs = cloud.sh_coeffs(i);
        let db = sh::basis_gradient(degree, &s.view_dir);
        let mut g_dir = Vector3::zeros();
        for kk in 1..count {
            let mut w = 0.0;
            for c in 0..3 {
                w += g_raw[c] * f64::from(coeffs[kk * 3 + c]);
            }
            for a in 0..3 {
                g_dir[a] += w * db[kk][a];
            }
        }
        let d = s.view_dir;
        g_mean += (g_dir - d * d.dot(&g_dir)) / s.view_dist;
    }

    let op = s.opacity;
    ParamGrad {
        mean: [g_mean.x, g_mean.y, g_mean.z],
        log_scale,
        rotation,
        opacity_logit: g.opacity * op * (1.0 - op),
        sh: g_sh,
        screen_norm: ((gu * 0.5 * k.width as f64).powi(2) + (gv * 0.5 * k.height as f64).powi(2)).sqrt(),
    }
}
