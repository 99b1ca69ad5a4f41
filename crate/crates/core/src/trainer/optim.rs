//! Learning-rate schedule and the adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use crate::gaussians::GaussianCloud;
use crate::rasterizer::GradientBuffer;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Per-group learning rates. Only the mean rate follows the exponential
/// schedule; it is additionally multiplied by the spatial scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub lr_start: f64,
    pub lr_end: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    /// Multiplier on the mean rate; the scene extent when unset.
    pub spatial_scale: Option<f64>,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { lr_start: 1.6e-4, lr_end: 1.6e-6, scale: 5e-3, rotation: 1e-3, opacity: 5e-2, sh: 2.5e-3, spatial_scale: None }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_end", self.lr_end),
            ("scale", self.scale),
            ("rotation", self.rotation),
            ("opacity", self.opacity),
            ("sh", self.sh),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("learning rate {name} must be positive, got {v}"));
            }
        }
        if self.lr_end > self.lr_start {
            return Err(format!("lr_end {} exceeds lr_start {}", self.lr_end, self.lr_start));
        }
        if let Some(s) = self.spatial_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(format!("spatial_scale must be positive, got {s}"));
            }
        }
        Ok(())
    }

    pub fn at(&self, iter: u64, total: u64, extent: f64) -> GroupRates {
        GroupRates {
            means: lr_at(iter, total, self.lr_start, self.lr_end) * self.spatial_scale.unwrap_or(extent),
            log_scales: self.scale,
            rotations: self.rotation,
            opacity: self.opacity,
            sh: self.sh,
        }
    }
}

/// `lr_start^(1-f) * lr_end^f` with `f = iter / total`, i.e. exponential
/// interpolation between the two rates. Exact at both ends.
pub fn lr_at(iter: u64, total: u64, lr_start: f64, lr_end: f64) -> f64 {
    if total == 0 {
        return lr_start;
    }
    let f = iter.min(total) as f64 / total as f64;
    lr_start.powf(1.0 - f) * lr_end.powf(f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub means: f64,
    pub log_scales: f64,
    pub rotations: f64,
    pub opacity: f64,
    pub sh: f64,
}

/// First and second moments of one parameter group, flattened with a fixed
/// width per Gaussian.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn remap(&mut self, origin: &[Option<usize>], width: usize) {
        let pick = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(origin.len() * width);
            for o in origin {
                match o {
                    Some(i) => out.extend_from_slice(&src[i * width..(i + 1) * width]),
                    None => out.extend(std::iter::repeat_n(0.0, width)),
                }
            }
            out
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    fn clear(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far (bias-correction exponent).
    pub step: u64,
    pub means: Moments,
    pub log_scales: Moments,
    pub rotations: Moments,
    pub opacity: Moments,
    pub sh: Moments,
}

impl AdamState {
    pub fn new(n: usize, sh_stride: usize) -> Self {
        Self {
            step: 0,
            means: Moments::zeros(3 * n),
            log_scales: Moments::zeros(3 * n),
            rotations: Moments::zeros(4 * n),
            opacity: Moments::zeros(n),
            sh: Moments::zeros(sh_stride * n),
        }
    }

    pub fn len(&self) -> usize {
        self.opacity.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.m.is_empty()
    }

    /// Follows a density-control pass: surviving Gaussians keep their
    /// moments, new ones start at zero.
    pub fn remap(&mut self, origin: &[Option<usize>], sh_stride: usize) {
        self.means.remap(origin, 3);
        self.log_scales.remap(origin, 3);
        self.rotations.remap(origin, 4);
        self.opacity.remap(origin, 1);
        self.sh.remap(origin, sh_stride);
    }

    pub fn reset_opacity_moments(&mut self) {
        self.opacity.clear();
    }

    /// One bias-corrected update of every parameter.
    pub fn apply(&mut self, cloud: &mut GaussianCloud, grad: &GradientBuffer, lr: &GroupRates) {
        assert_eq!(grad.len(), cloud.len(), "gradient buffer out of sync with cloud");
        assert_eq!(self.len(), cloud.len(), "optimizer state out of sync with cloud");
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step.min(i32::MAX as u64) as i32);
        let update = |params: &mut [f32], grads: &[f64], mo: &mut Moments, rate: f64| {
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(mo.m.iter_mut()).zip(mo.v.iter_mut()) {
                adam_update(p, *g, m, v, rate, bc1, bc2);
            }
        };
        update(cloud.means.as_flattened_mut(), grad.means.as_flattened(), &mut self.means, lr.means);
        update(cloud.log_scales.as_flattened_mut(), grad.log_scales.as_flattened(), &mut self.log_scales, lr.log_scales);
        update(cloud.rotations.as_flattened_mut(), grad.rotations.as_flattened(), &mut self.rotations, lr.rotations);
        update(&mut cloud.opacity_logits, &grad.opacity_logits, &mut self.opacity, lr.opacity);
        update(&mut cloud.sh, &grad.sh, &mut self.sh, lr.sh);
    }
}

#[inline]
fn adam_update(p: &mut f32, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *p = (f64::from(*p) - lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
}
