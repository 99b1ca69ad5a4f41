//! Reconstruction and pseudo-view losses with exact gradients, plus the
//! PSNR / SSIM metrics used for evaluation.
//!
//! All norms are mean-reduced. Gradients are returned with respect to the
//! rendered color and depth, ready to feed into
//! [`render_backward`](crate::rasterizer::render_backward).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lidar::DepthMap;
use crate::pixels::{Image, Plane};
use crate::rasterizer::RenderOutput;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const PERCEPTUAL_SCALES: usize = 3;
/// Keeps the gradient magnitude differentiable at zero.
const MAG_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("loss weight {0} is negative or not finite")]
    InvalidWeight(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_depth: f64,
    pub lambda_pseudo: f64,
    pub lambda_p_lpips: f64,
    pub lambda_p_depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ssim: 0.2, lambda_depth: 0.1, lambda_pseudo: 0.5, lambda_p_lpips: 0.5, lambda_p_depth: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_depth", self.lambda_depth),
            ("lambda_pseudo", self.lambda_pseudo),
            ("lambda_p_lpips", self.lambda_p_lpips),
            ("lambda_p_depth", self.lambda_p_depth),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LossError::InvalidWeight(name));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms. `recon_ssim` holds `1 - SSIM`; the pseudo terms are
/// averaged over the views of an event.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub recon_l1: f64,
    pub recon_ssim: f64,
    pub recon_depth: f64,
    pub pseudo_l1: f64,
    pub pseudo_perceptual: f64,
    pub pseudo_depth: f64,
}

impl LossReport {
    pub fn new(recon: &ReconLoss, pseudo: Option<&PseudoTerms>, w: &LossWeights) -> Self {
        let p = pseudo.copied().unwrap_or_default();
        let mut r = Self {
            total: 0.0,
            recon_l1: recon.l1,
            recon_ssim: recon.ssim,
            recon_depth: recon.depth,
            pseudo_l1: p.l1,
            pseudo_perceptual: p.perceptual,
            pseudo_depth: p.depth,
        };
        r.total = r.recompose(w);
        r
    }

    pub fn recon_total(&self, w: &LossWeights) -> f64 {
        self.recon_l1 + w.lambda_ssim * self.recon_ssim + w.lambda_depth * self.recon_depth
    }

    pub fn pseudo_total(&self, w: &LossWeights) -> f64 {
        self.pseudo_l1 + w.lambda_p_lpips * self.pseudo_perceptual + w.lambda_p_depth * self.pseudo_depth
    }

    /// Total loss rebuilt from the individual terms.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.recon_total(w) + w.lambda_pseudo * self.pseudo_total(w)
    }
}

/// Upstream gradient for the rasterizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub color: Image,
    pub depth: Plane,
}

impl LossGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { color: Image::new(width, height), depth: Plane::new(width, height) }
    }

    pub fn scale(&mut self, k: f64) {
        self.color.data_mut().iter_mut().for_each(|v| *v *= k);
        self.depth.data_mut().iter_mut().for_each(|v| *v *= k);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconLoss {
    pub l1: f64,
    /// `1 - SSIM`.
    pub ssim: f64,
    pub depth: f64,
    pub value: f64,
    pub grad: LossGrad,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PseudoTerms {
    pub l1: f64,
    pub perceptual: f64,
    pub depth: f64,
}

impl PseudoTerms {
    pub fn mean(terms: &[PseudoTerms]) -> Option<PseudoTerms> {
        if terms.is_empty() {
            return None;
        }
        let n = terms.len() as f64;
        let sum = terms.iter().fold(PseudoTerms::default(), |a, t| PseudoTerms {
            l1: a.l1 + t.l1,
            perceptual: a.perceptual + t.perceptual,
            depth: a.depth + t.depth,
        });
        Some(PseudoTerms { l1: sum.l1 / n, perceptual: sum.perceptual / n, depth: sum.depth / n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLoss {
    pub terms: PseudoTerms,
    /// Weighted pseudo loss, without `lambda_pseudo`.
    pub value: f64,
    pub grad: LossGrad,
}

/// A differentiable perceptual distance between a rendered image and a target.
pub trait PerceptualDistance: Sync {
    /// Distance and its gradient with respect to `rendered`.
    fn distance_with_grad(&self, rendered: &Image, target: &Image) -> (f64, Image);
}

/// Multi-scale L1 between Sobel gradient magnitudes. Stands in for a learned
/// perceptual metric; reported as "perceptual-proxy".
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientMagnitudeProxy;

impl PerceptualDistance for GradientMagnitudeProxy {
    fn distance_with_grad(&self, rendered: &Image, target: &Image) -> (f64, Image) {
        perceptual_proxy_with_grad(rendered, target)
    }
}

fn check_dims(expected: (usize, usize), got: (usize, usize)) -> Result<(), LossError> {
    if expected == got {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch { expected, got })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference and its gradient with respect to `a`.
pub fn l1_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), LossError> {
    check_dims(a.dims(), b.dims())?;
    let n = a.data().len().max(1) as f64;
    let mut grad = Image::new(a.width(), a.height());
    let mut sum = 0.0;
    for ((g, x), y) in grad.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        sum += (x - y).abs();
        *g = sign(x - y) / n;
    }
    Ok((sum / n, grad))
}

/// Mean absolute depth error over pixels where the target is valid and the
/// render has nonzero alpha. Returns 0 when no pixel qualifies.
pub fn depth_l1_with_grad(depth: &Plane, alpha: &Plane, target: &DepthMap) -> Result<(f64, Plane), LossError> {
    let dims = (depth.width(), depth.height());
    check_dims(dims, (target.width(), target.height()))?;
    check_dims(dims, (alpha.width(), alpha.height()))?;
    let mut grad = Plane::new(dims.0, dims.1);
    let used: Vec<usize> =
        (0..depth.data().len()).filter(|&i| target.is_valid_index(i) && alpha.data()[i] > 0.0).collect();
    if used.is_empty() {
        return Ok((0.0, grad));
    }
    let n = used.len() as f64;
    let mut sum = 0.0;
    let tv = target.values_or_zero();
    for &i in &used {
        let d = depth.data()[i] - tv[i];
        sum += d.abs();
        grad.data_mut()[i] = sign(d) / n;
    }
    Ok((sum / n, grad))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable symmetric blur with zero padding. Self-adjoint because the
/// window is symmetric.
fn blur(src: &[f64], width: usize, height: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let xx = x as isize + k as isize - half;
                if xx >= 0 && (xx as usize) < width {
                    acc += wk * src[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                let yy = y as isize + k as isize - half;
                if yy >= 0 && (yy as usize) < height {
                    acc += wk * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM of one channel and, optionally, its gradient with respect to `x`.
fn ssim_channel(x: &[f64], y: &[f64], width: usize, height: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let win = gaussian_window();
    let n = x.len();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = blur(x, width, height, &win);
    let my = blur(y, width, height, &win);
    let exx = blur(&xx, width, height, &win);
    let eyy = blur(&yy, width, height, &win);
    let exy = blur(&xy, width, height, &win);
    let mut total = 0.0;
    let (mut g_mx, mut g_exx, mut g_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
        let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + SSIM_C2;
        let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
        let b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            g_mx[i] = 2.0 * s * ((my[i] / a1 - mx[i] / b1) + (mx[i] / b2 - my[i] / a2));
            g_exx[i] = -s / b2;
            g_exy[i] = 2.0 * s / a2;
        }
    }
    let mean = total / n.max(1) as f64;
    if !want_grad {
        return (mean, None);
    }
    let inv_n = 1.0 / n as f64;
    let b_mx = blur(&g_mx, width, height, &win);
    let b_exx = blur(&g_exx, width, height, &win);
    let b_exy = blur(&g_exy, width, height, &win);
    let grad = (0..n).map(|i| inv_n * (b_mx[i] + 2.0 * x[i] * b_exx[i] + y[i] * b_exy[i])).collect();
    (mean, Some(grad))
}

/// Structural similarity (11x11 Gaussian window, sigma 1.5, zero padding,
/// dynamic range 1), averaged over the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, LossError> {
    check_dims(a.dims(), b.dims())?;
    let (w, h) = a.dims();
    Ok((0..3).map(|c| ssim_channel(&channel(a, c), &channel(b, c), w, h, false).0).sum::<f64>() / 3.0)
}

/// SSIM of a single-channel plane.
pub fn ssim_plane(a: &Plane, b: &Plane) -> Result<f64, LossError> {
    check_dims((a.width(), a.height()), (b.width(), b.height()))?;
    Ok(ssim_channel(a.data(), b.data(), a.width(), a.height(), false).0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image), LossError> {
    check_dims(a.dims(), b.dims())?;
    let (w, h) = a.dims();
    let mut grad = Image::new(w, h);
    let mut total = 0.0;
    for c in 0..3 {
        let (s, g) = ssim_channel(&channel(a, c), &channel(b, c), w, h, true);
        total += s / 3.0;
        for (i, gv) in g.unwrap_or_default().into_iter().enumerate() {
            grad.data_mut()[i * 3 + c] = gv / 3.0;
        }
    }
    Ok((total, grad))
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, LossError> {
    check_dims(a.dims(), b.dims())?;
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// 3x3 correlation with zero padding; `transpose` applies the adjoint.
fn correlate3(src: &[f64], width: usize, height: usize, k: &[[f64; 3]; 3], transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    let (ox, oy) = if transpose { (1 - dx as isize, 1 - dy as isize) } else { (dx as isize - 1, dy as isize - 1) };
                    let (xx, yy) = (x as isize + ox, y as isize + oy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < width && (yy as usize) < height {
                        acc += kv * src[yy as usize * width + xx as usize];
                    }
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// 2x2 average pooling (odd trailing row/column dropped).
fn downsample(src: &[f64], width: usize, height: usize) -> (Vec<f64>, usize, usize) {
    let (w2, h2) = (width / 2, height / 2);
    let mut out = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let i = 2 * y * width + 2 * x;
            out[y * w2 + x] = 0.25 * (src[i] + src[i + 1] + src[i + width] + src[i + width + 1]);
        }
    }
    (out, w2, h2)
}

fn upsample_adjoint(g: &[f64], w2: usize, h2: usize, width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; width * height];
    for y in 0..h2 {
        for x in 0..w2 {
            let v = 0.25 * g[y * w2 + x];
            let i = 2 * y * width + 2 * x;
            out[i] += v;
            out[i + 1] += v;
            out[i + width] += v;
            out[i + width + 1] += v;
        }
    }
    out
}

fn grad_magnitude(src: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let gx = correlate3(src, width, height, &SOBEL_X, false);
    let gy = correlate3(src, width, height, &SOBEL_Y, false);
    let mag = gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b + MAG_EPS).sqrt()).collect();
    (gx, gy, mag)
}

fn proxy_channel(a: &[f64], b: &[f64], width: usize, height: usize) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; a.len()];
    // (pooled a, pooled b, dims) per scale, finest first.
    let mut levels = vec![(a.to_vec(), b.to_vec(), width, height)];
    for _ in 1..PERCEPTUAL_SCALES {
        let (pa, pb, w, h) = levels.last().unwrap();
        if *w < 2 || *h < 2 {
            break;
        }
        let (da, w2, h2) = downsample(pa, *w, *h);
        let (db, _, _) = downsample(pb, *w, *h);
        levels.push((da, db, w2, h2));
    }
    let scales = levels.len() as f64;
    for (level, (la, lb, w, h)) in levels.iter().enumerate() {
        let n = (w * h).max(1) as f64;
        let (gx, gy, ma) = grad_magnitude(la, *w, *h);
        let (_, _, mb) = grad_magnitude(lb, *w, *h);
        let mut d_gx = vec![0.0; la.len()];
        let mut d_gy = vec![0.0; la.len()];
        for i in 0..la.len() {
            let diff = ma[i] - mb[i];
            total += diff.abs() / n / scales;
            let g = sign(diff) / n / scales / ma[i];
            d_gx[i] = g * gx[i];
            d_gy[i] = g * gy[i];
        }
        let mut g_level: Vec<f64> = correlate3(&d_gx, *w, *h, &SOBEL_X, true)
            .iter()
            .zip(correlate3(&d_gy, *w, *h, &SOBEL_Y, true))
            .map(|(p, q)| p + q)
            .collect();
        for l in (0..level).rev() {
            let (_, _, wl, hl) = &levels[l];
            let (wc, hc) = (levels[l + 1].2, levels[l + 1].3);
            g_level = upsample_adjoint(&g_level, wc, hc, *wl, *hl);
        }
        for (g, v) in grad.iter_mut().zip(g_level) {
            *g += v;
        }
    }
    (total, grad)
}

/// Perceptual proxy and its gradient with respect to `a`, channel-averaged.
pub fn perceptual_proxy_with_grad(a: &Image, b: &Image) -> (f64, Image) {
    let (w, h) = a.dims();
    let mut grad = Image::new(w, h);
    let mut total = 0.0;
    for c in 0..3 {
        let (v, g) = proxy_channel(&channel(a, c), &channel(b, c), w, h);
        total += v / 3.0;
        for (i, gv) in g.into_iter().enumerate() {
            grad.data_mut()[i * 3 + c] = gv / 3.0;
        }
    }
    (total, grad)
}

pub fn perceptual_proxy(a: &Image, b: &Image) -> Result<f64, LossError> {
    check_dims(a.dims(), b.dims())?;
    Ok(perceptual_proxy_with_grad(a, b).0)
}

/// Training-view loss from raw render buffers.
pub fn recon_loss_parts(
    color: &Image,
    depth: &Plane,
    alpha: &Plane,
    target_image: &Image,
    target_depth: &DepthMap,
    w: &LossWeights,
) -> Result<ReconLoss, LossError> {
    let (l1, g_l1) = l1_with_grad(color, target_image)?;
    let (s, g_s) = ssim_with_grad(color, target_image)?;
    let (d, g_d) = depth_l1_with_grad(depth, alpha, target_depth)?;
    let mut grad = LossGrad { color: g_l1, depth: g_d };
    for (g, gs) in grad.color.data_mut().iter_mut().zip(g_s.data()) {
        *g -= w.lambda_ssim * gs;
    }
    grad.depth.data_mut().iter_mut().for_each(|v| *v *= w.lambda_depth);
    let ssim_term = 1.0 - s;
    Ok(ReconLoss { l1, ssim: ssim_term, depth: d, value: l1 + w.lambda_ssim * ssim_term + w.lambda_depth * d, grad })
}

/// `|I - I~|_1 + lambda_ssim (1 - SSIM) + lambda_depth |D - D~|_1`.
pub fn recon_loss(
    rendered: &RenderOutput,
    target_image: &Image,
    target_depth: &DepthMap,
    w: &LossWeights,
) -> Result<ReconLoss, LossError> {
    recon_loss_parts(&rendered.color, &rendered.depth, &rendered.alpha, target_image, target_depth, w)
}

/// Pseudo-view loss from raw render buffers with a chosen perceptual distance.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_loss_parts(
    color: &Image,
    depth: &Plane,
    alpha: &Plane,
    guidance: &Image,
    pseudo_depth: &DepthMap,
    w: &LossWeights,
    perceptual: &dyn PerceptualDistance,
) -> Result<PseudoLoss, LossError> {
    let (l1, g_l1) = l1_with_grad(color, guidance)?;
    let (p, g_p) = perceptual.distance_with_grad(color, guidance);
    let (d, g_d) = depth_l1_with_grad(depth, alpha, pseudo_depth)?;
    let mut grad = LossGrad { color: g_l1, depth: g_d };
    for (g, gp) in grad.color.data_mut().iter_mut().zip(g_p.data()) {
        *g += w.lambda_p_lpips * gp;
    }
    grad.depth.data_mut().iter_mut().for_each(|v| *v *= w.lambda_p_depth);
    let terms = PseudoTerms { l1, perceptual: p, depth: d };
    Ok(PseudoLoss { terms, value: l1 + w.lambda_p_lpips * p + w.lambda_p_depth * d, grad })
}

/// `|I_g - I~_p|_1 + lambda_p_lpips L_perc + lambda_p_depth |D_p - D~_p|_1`
/// with the gradient-magnitude proxy as `L_perc`.
pub fn pseudo_loss(
    rendered: &RenderOutput,
    guidance: &Image,
    pseudo_depth: &DepthMap,
    w: &LossWeights,
) -> Result<PseudoLoss, LossError> {
    pseudo_loss_with(rendered, guidance, pseudo_depth, w, &GradientMagnitudeProxy)
}

pub fn pseudo_loss_with(
    rendered: &RenderOutput,
    guidance: &Image,
    pseudo_depth: &DepthMap,
    w: &LossWeights,
    perceptual: &dyn PerceptualDistance,
) -> Result<PseudoLoss, LossError> {
    check_dims(rendered.color.dims(), guidance.dims())?;
    pseudo_loss_parts(&rendered.color, &rendered.depth, &rendered.alpha, guidance, pseudo_depth, w, perceptual)
}
