//! Test-only oracles, written independently of the library's render path:
//! a per-pixel, per-Gaussian compositor with no tiling or culling, a real
//! spherical-harmonics evaluator built from associated Legendre
//! polynomials, and finite-difference gradient checking.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::Rng;
use streetsplat::gaussians::{Gaussian, GaussianCloud};
use streetsplat::geometry::{CameraView, Intrinsics, Pose};
use streetsplat::pixels::{Image, Plane};
use streetsplat::rasterizer::{render, render_backward, RenderSettings};

/// Associated Legendre polynomial P_l^m(x) including the Condon-Shortley phase.
pub fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    if m > 0 {
        let somx2 = ((1.0 - x) * (1.0 + x)).sqrt();
        let mut fact = 1.0;
        for _ in 0..m {
            pmm *= -fact * somx2;
            fact += 2.0;
        }
    }
    if l == m {
        return pmm;
    }
    let mut pmmp1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmmp1;
    }
    let mut pll = 0.0;
    for ll in (m + 2)..=l {
        pll = ((2 * ll - 1) as f64 * x * pmmp1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmmp1;
        pmmp1 = pll;
    }
    pll
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Real SH basis value for band `l`, order `m` at a unit direction, using
/// the `l*l + l + m` indexing of splatting renderers.
pub fn real_sh(l: usize, m: i64, d: &Vector3<f64>) -> f64 {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let phi = d.y.atan2(d.x);
    let am = m.unsigned_abs() as usize;
    let k = ((2 * l + 1) as f64 / (4.0 * PI) * factorial(l - am) / factorial(l + am)).sqrt();
    let p = legendre(l, am, theta.cos());
    match m.cmp(&0) {
        std::cmp::Ordering::Equal => k * p,
        std::cmp::Ordering::Greater => 2f64.sqrt() * k * (am as f64 * phi).cos() * p,
        std::cmp::Ordering::Less => 2f64.sqrt() * k * (am as f64 * phi).sin() * p,
    }
}

pub fn sh_color_oracle(coeffs: &[f32], degree: usize, d: &Vector3<f64>) -> [f64; 3] {
    let mut rgb = [0.5; 3];
    for l in 0..=degree {
        for m in -(l as i64)..=(l as i64) {
            let idx = (l * l) as i64 + l as i64 + m;
            let y = real_sh(l, m, d);
            for c in 0..3 {
                rgb[c] += y * f64::from(coeffs[idx as usize * 3 + c]);
            }
        }
    }
    rgb
}

fn quat_matrix(q: [f32; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| f64::from(v) / n);
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

pub struct OracleImage {
    pub color: Image,
    pub depth: Plane,
    pub alpha: Plane,
}

/// Composites every Gaussian at every pixel, front to back, with the same
/// alpha rules as the renderer (alpha < 1/255 skipped, capped at 0.99,
/// near plane 0.2, 0.3 px^2 low-pass, 1.3x frustum clamp in the Jacobian).
pub fn oracle_render(cloud: &GaussianCloud, view: &CameraView, degree: usize, bg: [f64; 3]) -> OracleImage {
    let k = view.intrinsics;
    let rot_c2w = view.pose.rotation.to_rotation_matrix().into_inner();
    let rot_w2c = rot_c2w.transpose();
    let center = view.pose.translation;

    struct P {
        idx: usize,
        u: f64,
        v: f64,
        inv: Matrix2<f64>,
        opacity: f64,
        color: [f64; 3],
        z: f64,
    }
    let mut projected = Vec::new();
    for i in 0..cloud.len() {
        let g: Gaussian = cloud.get(i);
        let mu = Vector3::new(f64::from(g.mean[0]), f64::from(g.mean[1]), f64::from(g.mean[2]));
        let pc = rot_w2c * (mu - center);
        if pc.z <= 0.2 {
            continue;
        }
        let s = Matrix3::from_diagonal(&Vector3::from(g.log_scale.map(|v| f64::from(v).exp())));
        let r = quat_matrix(g.rotation);
        let cov_w = r * s * s * r.transpose();
        let cov_c = rot_w2c * cov_w * rot_w2c.transpose();
        // Jacobian with x/z, y/z clamped to 1.3x the frustum half-extent.
        let lx = 1.3 * k.cx.max(k.width as f64 - k.cx) / k.fx;
        let ly = 1.3 * k.cy.max(k.height as f64 - k.cy) / k.fy;
        let tx = (pc.x / pc.z).clamp(-lx, lx) * pc.z;
        let ty = (pc.y / pc.z).clamp(-ly, ly) * pc.z;
        let j = nalgebra::Matrix2x3::new(
            k.fx / pc.z,
            0.0,
            -k.fx * tx / (pc.z * pc.z),
            0.0,
            k.fy / pc.z,
            -k.fy * ty / (pc.z * pc.z),
        );
        let cov2 = j * cov_c * j.transpose() + Matrix2::identity() * 0.3;
        let Some(inv) = cov2.try_inverse() else { continue };
        let dir = (mu - center).normalize();
        let color = sh_color_oracle(&g.sh, degree, &dir).map(|c| c.clamp(0.0, 1.0));
        projected.push(P {
            idx: i,
            u: k.fx * pc.x / pc.z + k.cx,
            v: k.fy * pc.y / pc.z + k.cy,
            inv,
            opacity: 1.0 / (1.0 + (-f64::from(g.opacity_logit)).exp()),
            color,
            z: pc.z,
        });
    }
    projected.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.idx.cmp(&b.idx)));

    let (w, h) = (k.width, k.height);
    let mut color = Image::new(w, h);
    let mut depth = Plane::new(w, h);
    let mut alpha = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut dsum = 0.0;
            for p in &projected {
                let d = nalgebra::Vector2::new(px - p.u, py - p.v);
                let q = (d.transpose() * p.inv * d)[(0, 0)];
                let a = p.opacity * (-0.5 * q).exp();
                if a < 1.0 / 255.0 {
                    continue;
                }
                let a = a.min(0.99);
                for ch in 0..3 {
                    c[ch] += p.color[ch] * a * t;
                }
                dsum += p.z * a * t;
                t *= 1.0 - a;
            }
            for ch in 0..3 {
                c[ch] += bg[ch] * t;
            }
            color.set(x, y, c);
            alpha.set(x, y, 1.0 - t);
            depth.set(x, y, if t < 1.0 { dsum / (1.0 - t) } else { 0.0 });
        }
    }
    OracleImage { color, depth, alpha }
}

pub fn random_quat<R: Rng>(rng: &mut R) -> [f32; 4] {
    loop {
        let q: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.2 {
            return q.map(|v| v / n);
        }
    }
}

/// Random Gaussians in front of a camera at the origin looking down +z.
pub fn random_scene<R: Rng>(
    rng: &mut R,
    n: usize,
    size: usize,
    sh_degree: usize,
    scale_range: (f32, f32),
) -> (GaussianCloud, CameraView) {
    let f = size as f64 * 0.9;
    let view = CameraView::new(
        Intrinsics::new(f, f, size as f64 / 2.0, size as f64 / 2.0, size, size).unwrap(),
        Pose::identity(),
    )
    .unwrap();
    let mut cloud = GaussianCloud::new(sh_degree).unwrap();
    let stride = cloud.sh_stride();
    for _ in 0..n {
        let z = rng.random_range(2.0f32..6.0);
        let mean = [rng.random_range(-0.45..0.45) * z, rng.random_range(-0.45..0.45) * z, z];
        let mut sh: Vec<f32> = (0..stride).map(|_| rng.random_range(-0.15..0.15)).collect();
        for c in 0..3 {
            sh[c] = rng.random_range(-1.2..1.2);
        }
        cloud.push(&Gaussian {
            mean,
            log_scale: std::array::from_fn(|_| rng.random_range(scale_range.0..scale_range.1).ln()),
            rotation: random_quat(rng),
            opacity_logit: rng.random_range(-1.5f32..2.0),
            sh,
        });
    }
    (cloud, view)
}

/// Scalar test loss: weighted sum of rendered color and depth.
pub struct LinearLoss {
    pub color_w: Image,
    pub depth_w: Plane,
}

impl LinearLoss {
    pub fn random<R: Rng>(rng: &mut R, w: usize, h: usize) -> Self {
        let color_w = Image::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let depth_w = Plane::from_vec(w, h, (0..w * h).map(|_| rng.random_range(-0.2..0.2)).collect());
        Self { color_w, depth_w }
    }

    pub fn eval(&self, cloud: &GaussianCloud, view: &CameraView, settings: &RenderSettings) -> f64 {
        let out = render(cloud, view, settings);
        let c: f64 = out.color.data().iter().zip(self.color_w.data()).map(|(a, b)| a * b).sum();
        let d: f64 = out.depth.data().iter().zip(self.depth_w.data()).map(|(a, b)| a * b).sum();
        c + d
    }
}

/// Parameter coordinate addressing: (field, flat index).
#[derive(Debug, Clone, Copy)]
pub enum Field {
    Mean,
    LogScale,
    Rotation,
    Opacity,
    Sh,
}

fn param_mut(cloud: &mut GaussianCloud, field: Field, idx: usize) -> &mut f32 {
    match field {
        Field::Mean => &mut cloud.means[idx / 3][idx % 3],
        Field::LogScale => &mut cloud.log_scales[idx / 3][idx % 3],
        Field::Rotation => &mut cloud.rotations[idx / 4][idx % 4],
        Field::Opacity => &mut cloud.opacity_logits[idx],
        Field::Sh => &mut cloud.sh[idx],
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheckStats {
    pub checked: usize,
    pub agreed: usize,
    pub max_rel_failed: f64,
}

impl GradCheckStats {
    pub fn merge(&mut self, o: &GradCheckStats) {
        self.checked += o.checked;
        self.agreed += o.agreed;
        self.max_rel_failed = self.max_rel_failed.max(o.max_rel_failed);
    }

    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.agreed as f64 / self.checked as f64
        }
    }
}

/// Compares the analytic backward pass against central differences with
/// step `eps` on every parameter coordinate whose analytic |grad| exceeds
/// `min_grad`.
pub fn grad_check(
    cloud: &GaussianCloud,
    view: &CameraView,
    loss: &LinearLoss,
    settings: &RenderSettings,
    eps: f32,
    rel_tol: f64,
    min_grad: f64,
) -> GradCheckStats {
    let out = render(cloud, view, settings);
    let grads = render_backward(cloud, view, &out, &loss.color_w, &loss.depth_w).unwrap();
    let mut stats = GradCheckStats::default();
    let mut fields: Vec<(Field, usize, f64)> = Vec::new();
    for (i, g) in grads.means.iter().flatten().enumerate() {
        fields.push((Field::Mean, i, *g));
    }
    for (i, g) in grads.log_scales.iter().flatten().enumerate() {
        fields.push((Field::LogScale, i, *g));
    }
    for (i, g) in grads.rotations.iter().flatten().enumerate() {
        fields.push((Field::Rotation, i, *g));
    }
    for (i, g) in grads.opacity_logits.iter().enumerate() {
        fields.push((Field::Opacity, i, *g));
    }
    for (i, g) in grads.sh.iter().enumerate() {
        fields.push((Field::Sh, i, *g));
    }
    let mut work = cloud.clone();
    for (field, idx, analytic) in fields {
        if analytic.abs() <= min_grad {
            continue;
        }
        let orig = *param_mut(&mut work, field, idx);
        let plus = orig + eps;
        let minus = orig - eps;
        *param_mut(&mut work, field, idx) = plus;
        let fp = loss.eval(&work, view, settings);
        *param_mut(&mut work, field, idx) = minus;
        let fm = loss.eval(&work, view, settings);
        *param_mut(&mut work, field, idx) = orig;
        let numeric = (fp - fm) / (f64::from(plus) - f64::from(minus));
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs());
        stats.checked += 1;
        if rel <= rel_tol {
            stats.agreed += 1;
        } else {
            stats.max_rel_failed = stats.max_rel_failed.max(rel);
            if std::env::var("GRADCHECK_VERBOSE").is_ok() {
                eprintln!("{field:?}[{idx}] analytic={analytic:.6e} numeric={numeric:.6e} rel={rel:.3e}");
            }
        }
    }
    stats
}
