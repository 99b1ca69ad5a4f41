//! Guidance images for pseudo views: strength scheduling, pixel-space noise
//! injection and the denoising providers.

pub mod wire;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraView;
use crate::lidar::DepthMap;
use crate::pixels::Image;

pub use wire::RemoteProvider;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("guidance provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("guidance provider timed out after {0:.1} s")]
    ProviderTimeout(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid strength {0}")]
    InvalidStrength(f64),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("provider reported: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrengthSchedule {
    pub s_min: f64,
    pub s_max_start: f64,
    pub s_max_end: f64,
    pub t_max: u32,
    pub t_min: u32,
    pub total_iters: u64,
}

impl Default for StrengthSchedule {
    fn default() -> Self {
        Self { s_min: 0.2, s_max_start: 0.6, s_max_end: 0.4, t_max: 10, t_min: 0, total_iters: 50_000 }
    }
}

impl StrengthSchedule {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let ok = 0.0 <= self.s_min
            && self.s_min <= self.s_max_end
            && self.s_max_end <= self.s_max_start
            && self.s_max_start <= 1.0
            && self.t_min <= self.t_max
            && self.t_max > 0;
        if ok {
            Ok(())
        } else {
            Err(GuidanceError::InvalidStrength(self.s_max_start))
        }
    }

    /// Upper strength bound, linear from `s_max_start` at iteration 0 to
    /// `s_max_end` at iteration `total_iters - 1` and held there.
    pub fn s_max(&self, iter: u64) -> f64 {
        let span = self.total_iters.saturating_sub(1);
        if span == 0 || iter >= span {
            return self.s_max_end;
        }
        let f = iter as f64 / span as f64;
        (self.s_max_start + (self.s_max_end - self.s_max_start) * f).max(self.s_max_end)
    }

    /// `t = round(s * t_max)` clamped to `[t_min, t_max]`.
    pub fn level_for(&self, s: f64) -> u32 {
        let t = (s * f64::from(self.t_max)).round().max(0.0) as u32;
        t.clamp(self.t_min, self.t_max)
    }

    /// Strength for a uniform quantile `u` in `[0, 1)`.
    pub fn strength_at(&self, iter: u64, u: f64) -> f64 {
        self.s_min + u * (self.s_max(iter) - self.s_min)
    }
}

/// Draws `s ~ U[s_min, s_max(iter)]` and its noise level.
pub fn sample_strength<R: Rng + ?Sized>(sched: &StrengthSchedule, iter: u64, rng: &mut R) -> (f64, u32) {
    let s = sched.strength_at(iter, rng.random::<f64>());
    (s, sched.level_for(s))
}

/// Everything a provider may condition on for one pseudo view.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceRequest {
    pub request_id: u64,
    pub rendered: Image,
    pub ref_prev: Image,
    pub ref_next: Image,
    pub depth_target: DepthMap,
    pub depth_prev: DepthMap,
    pub depth_next: DepthMap,
    pub strength: f64,
    pub t: u32,
    pub t_max: u32,
    pub seed: u64,
    /// Pseudo-view camera; only the oracle provider needs it.
    pub view: Option<CameraView>,
}

impl GuidanceRequest {
    pub fn dims(&self) -> (usize, usize) {
        self.rendered.dims()
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let d = self.dims();
        for (name, got) in [("ref_prev", self.ref_prev.dims()), ("ref_next", self.ref_next.dims())] {
            if got != d {
                return Err(GuidanceError::ShapeMismatch(format!("{name} is {got:?}, rendered is {d:?}")));
            }
        }
        for (name, m) in [("depth_target", &self.depth_target), ("depth_prev", &self.depth_prev), ("depth_next", &self.depth_next)] {
            if (m.width(), m.height()) != d {
                return Err(GuidanceError::ShapeMismatch(format!("{name} is {:?}, rendered is {d:?}", (m.width(), m.height()))));
            }
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(GuidanceError::InvalidStrength(self.strength));
        }
        if self.t > self.t_max || self.t_max == 0 {
            return Err(GuidanceError::Protocol(format!("noise level {} outside [0, {}]", self.t, self.t_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceResponse {
    pub guidance: Image,
    pub provider_id: String,
    pub noise_level_used: u32,
}

/// Denoises a noised render from level `t` down to the minimum level.
/// Implementations must be deterministic in `(noisy, t, request)`.
pub trait GuidanceProvider: Send + Sync {
    fn id(&self) -> String;
    fn denoise(&self, noisy: &Image, t: u32, req: &GuidanceRequest) -> Result<Image, GuidanceError>;
}

/// `rendered + (t / t_max) * N(0, 1)` per channel, seeded by `seed`.
pub fn add_noise(rendered: &Image, t: u32, t_max: u32, seed: u64) -> Image {
    if t == 0 {
        return rendered.clone();
    }
    let sigma = f64::from(t) / f64::from(t_max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rendered.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
    out
}

/// Noises the render at the request's level, runs the provider and clamps
/// the result to `[0, 1]`.
pub fn make_guidance(req: &GuidanceRequest, provider: &dyn GuidanceProvider) -> Result<GuidanceResponse, GuidanceError> {
    req.validate()?;
    let noisy = add_noise(&req.rendered, req.t, req.t_max, req.seed);
    let out = provider.denoise(&noisy, req.t, req)?;
    if out.dims() != req.dims() {
        return Err(GuidanceError::ShapeMismatch(format!("provider returned {:?}, expected {:?}", out.dims(), req.dims())));
    }
    Ok(GuidanceResponse { guidance: out.clamped(), provider_id: provider.id(), noise_level_used: req.t })
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProvider;

impl GuidanceProvider for IdentityProvider {
    fn id(&self) -> String {
        "identity".into()
    }

    fn denoise(&self, noisy: &Image, _t: u32, _req: &GuidanceRequest) -> Result<Image, GuidanceError> {
        Ok(noisy.clone())
    }
}

/// Blends a depth-guided smoothing of the reference mean with the noisy
/// input: `w * smooth(refs) + (1 - w) * noisy` with `w = t / t_max`.
#[derive(Debug, Clone, Copy)]
pub struct ToyProvider {
    pub radius: usize,
    pub spatial_sigma: f64,
    /// Relative depth difference scale for the range weight.
    pub depth_sigma: f64,
}

impl Default for ToyProvider {
    fn default() -> Self {
        Self { radius: 2, spatial_sigma: 1.5, depth_sigma: 0.1 }
    }
}

impl ToyProvider {
    pub fn blend_weight(t: u32, t_max: u32) -> f64 {
        f64::from(t) / f64::from(t_max)
    }

    /// Joint-bilateral smoothing of `img`; neighbours across a depth edge in
    /// `depth` get little weight. Pixels without valid depth use the spatial
    /// kernel alone.
    pub fn smooth(&self, img: &Image, depth: &DepthMap) -> Image {
        let (w, h) = img.dims();
        let r = self.radius as isize;
        Image::from_fn(w, h, |x, y| {
            let dc = depth.get(x, y);
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (xx, yy) = (x as isize + dx, y as isize + dy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    let (xx, yy) = (xx as usize, yy as usize);
                    let mut wt = (-((dx * dx + dy * dy) as f64) / (2.0 * self.spatial_sigma * self.spatial_sigma)).exp();
                    if let (Some(a), Some(b)) = (dc, depth.get(xx, yy)) {
                        let rel = (a - b) / a.max(b);
                        wt *= (-(rel * rel) / (2.0 * self.depth_sigma * self.depth_sigma)).exp();
                    }
                    let c = img.get(xx, yy);
                    for k in 0..3 {
                        acc[k] += wt * c[k];
                    }
                    wsum += wt;
                }
            }
            acc.map(|v| v / wsum)
        })
    }
}

impl GuidanceProvider for ToyProvider {
    fn id(&self) -> String {
        "toy".into()
    }

    fn denoise(&self, noisy: &Image, t: u32, req: &GuidanceRequest) -> Result<Image, GuidanceError> {
        let w = Self::blend_weight(t, req.t_max);
        let mut mean = req.ref_prev.clone();
        for (m, n) in mean.data_mut().iter_mut().zip(req.ref_next.data()) {
            *m = 0.5 * (*m + n);
        }
        let smooth = self.smooth(&mean, &req.depth_target);
        let mut out = noisy.clone();
        for (o, s) in out.data_mut().iter_mut().zip(smooth.data()) {
            *o = w * s + (1.0 - w) * *o;
        }
        Ok(out)
    }
}

type TruthFn = dyn Fn(&CameraView) -> Image + Send + Sync;

/// Returns the ground-truth image of the requested pseudo view, whatever the
/// noise level. For synthetic scenes only.
pub struct OracleProvider {
    truth: Box<TruthFn>,
}

impl OracleProvider {
    pub fn new(truth: impl Fn(&CameraView) -> Image + Send + Sync + 'static) -> Self {
        Self { truth: Box::new(truth) }
    }
}

impl GuidanceProvider for OracleProvider {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn denoise(&self, _noisy: &Image, _t: u32, req: &GuidanceRequest) -> Result<Image, GuidanceError> {
        let view = req.view.as_ref().ok_or_else(|| GuidanceError::ProviderUnavailable("oracle needs the pseudo-view camera".into()))?;
        Ok((self.truth)(view))
    }
}

/// Wraps a provider and records every call as `(request_id, t)`.
pub struct InstrumentedProvider<P> {
    inner: P,
    calls: AtomicUsize,
    log: Mutex<Vec<(u64, u32)>>,
}

impl<P: GuidanceProvider> InstrumentedProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: AtomicUsize::new(0), log: Mutex::new(Vec::new()) }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<(u64, u32)> {
        let mut v = self.log.lock().map(|l| l.clone()).unwrap_or_default();
        v.sort_unstable();
        v
    }
}

impl<P: GuidanceProvider> GuidanceProvider for InstrumentedProvider<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn denoise(&self, noisy: &Image, t: u32, req: &GuidanceRequest) -> Result<Image, GuidanceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Ok(mut l) = self.log.lock() {
            l.push((req.request_id, t));
        }
        self.inner.denoise(noisy, t, req)
    }
}

impl<P: GuidanceProvider + ?Sized> GuidanceProvider for Box<P> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn denoise(&self, noisy: &Image, t: u32, req: &GuidanceRequest) -> Result<Image, GuidanceError> {
        (**self).denoise(noisy, t, req)
    }
}

impl<P: GuidanceProvider + ?Sized> GuidanceProvider for std::sync::Arc<P> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn denoise(&self, noisy: &Image, t: u32, req: &GuidanceRequest) -> Result<Image, GuidanceError> {
        (**self).denoise(noisy, t, req)
    }
}
