//! Optimization loop: training-view steps, pseudo-view events, learning-rate
//! schedule, density control, evaluation and checkpoints.
//!
//! Iterations are counted from 0. At iteration `i` a pseudo event runs first
//! when `i >= warmup_iters` and `i % cadence == 0`, then one training-view
//! step; `TrainState::iter` is the number of completed steps.

pub mod optim;
pub mod state_file;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussians::{densify_and_prune, init_from_points, reset_opacity, DensifyConfig, GaussianCloud, GaussianError, GradStats};
use crate::geometry::{sample_pseudo_views, CameraView, PseudoViewConfig};
use crate::guidance::{make_guidance, sample_strength, GuidanceError, GuidanceProvider, GuidanceRequest, StrengthSchedule};
use crate::lidar::{accumulate_and_downsample, colorize_sweep, complete_depth, render_depth, DepthMap, LidarError};
use crate::losses::{perceptual_proxy, psnr, pseudo_loss, recon_loss, ssim, LossError, LossReport, LossWeights, PseudoTerms};
use crate::pixels::Image;
use crate::rasterizer::{render, render_backward, GradientBuffer, RenderError, RenderSettings};
use crate::scene_io::{load_checkpoint, save_checkpoint, DatasetManifest, SceneError};

pub use optim::{lr_at, AdamState, GroupRates, LearningRates, Moments};
pub use state_file::{load_state, save_state, OptimizerSnapshot};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STATE_FILE: &str = "train_state.bin";
/// Opacity cap applied by the periodic reset.
pub const OPACITY_RESET_VALUE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Lidar(#[from] LidarError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("pseudo event refused at iteration {iter}: {reason}")]
    EventRefused { iter: u64, reason: String },
    #[error("no LiDAR point of the training frames projects into an image")]
    NoInitPoints,
    #[error("dataset has no training frames")]
    NoTrainingFrames,
    #[error("non-finite gradient at iteration {0}")]
    NonFinite(u64),
    #[error("training state {state} (iteration {state_iter}) does not match checkpoint (iteration {checkpoint_iter})")]
    StateMismatch { state: PathBuf, state_iter: u64, checkpoint_iter: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub lr: LearningRates,
    pub weights: LossWeights,
    /// `total_iters` of the schedule is overridden by the run length.
    pub schedule: StrengthSchedule,
    /// Holds the event cadence `k` and the views per event `M`.
    pub pseudo: PseudoViewConfig,
    pub densify: DensifyConfig,
    pub sh_degree: usize,
    /// One more SH band becomes active every this many iterations.
    pub sh_increase_interval: u64,
    pub init_opacity: f64,
    pub voxel_size: f64,
    pub top_mask_rows: usize,
    pub background: [f64; 3],
    pub seed: u64,
    /// Single-threaded rendering and guidance.
    pub deterministic: bool,
    /// 0 evaluates only at the end of the run.
    pub eval_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 50_000,
            warmup_iters: 500,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            schedule: StrengthSchedule::default(),
            pseudo: PseudoViewConfig::default(),
            densify: DensifyConfig::default(),
            sh_degree: 3,
            sh_increase_interval: 1000,
            init_opacity: 0.1,
            voxel_size: 0.5,
            top_mask_rows: 80,
            background: [0.0; 3],
            seed: 0,
            deterministic: false,
            eval_every: 0,
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.total_iters > 0 && self.warmup_iters >= self.total_iters {
            return bad(format!("warmup_iters {} must be below total_iters {}", self.warmup_iters, self.total_iters));
        }
        self.pseudo.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.lr.validate().map_err(TrainError::Config)?;
        self.weights.validate()?;
        self.run_schedule().validate()?;
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return bad(format!("sh_degree {} above {}", self.sh_degree, crate::sh::MAX_DEGREE));
        }
        if self.sh_increase_interval == 0 {
            return bad("sh_increase_interval must be >= 1".into());
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad(format!("init_opacity {} outside (0, 1)", self.init_opacity));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if self.densify.enabled && self.densify.interval == 0 {
            return bad("densify.interval must be >= 1".into());
        }
        Ok(())
    }

    pub fn run_schedule(&self) -> StrengthSchedule {
        StrengthSchedule { total_iters: self.total_iters.max(1), ..self.schedule }
    }

    pub fn active_sh_degree(&self, iter: u64) -> usize {
        self.sh_degree.min((iter / self.sh_increase_interval) as usize)
    }

    pub fn render_settings(&self, iter: u64) -> RenderSettings {
        RenderSettings { sh_degree: self.active_sh_degree(iter), background: self.background, parallel: !self.deterministic }
    }

    pub fn is_event_iter(&self, iter: u64) -> bool {
        iter >= self.warmup_iters && iter % self.pseudo.cadence as u64 == 0
    }

    /// Provider calls made by a full run without failures.
    pub fn expected_provider_calls(&self) -> u64 {
        if self.weights.lambda_pseudo == 0.0 {
            return 0;
        }
        (0..self.total_iters).filter(|i| self.is_event_iter(*i)).count() as u64 * self.pseudo.count_per_event as u64
    }
}

const STREAM_EPOCH: u64 = 1;
const STREAM_VIEWS: u64 = 2;
const STREAM_STRENGTH: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_DENSIFY: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the random stream for `(seed, purpose, index)`. Every draw of a
/// run comes from such a stream, so no generator state needs saving.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ purpose) ^ index)
}

fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}

/// Shuffled training-frame order of one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, STREAM_EPOCH, epoch));
    order
}

/// A training frame with everything a step needs precomputed.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub frame_id: u32,
    pub view: CameraView,
    pub image: Image,
    /// Sparse depth of the accumulated training LiDAR at this view.
    pub depth: DepthMap,
    /// Completed depth, used to condition guidance.
    pub depth_dense: DepthMap,
}

#[derive(Debug, Clone)]
pub struct TestView {
    pub frame_id: u32,
    pub view: CameraView,
    pub image: Image,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    /// Training frames in frame-id order.
    pub train: Vec<FrameData>,
    pub test: Vec<TestView>,
    /// All training-frame LiDAR points, world frame.
    pub lidar_points: Vec<Vector3<f64>>,
    /// Camera-spread radius used for spatial learning rates and densification.
    pub extent: f64,
    pub top_mask_rows: usize,
}

impl TrainData {
    pub fn prepare(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let frames = manifest.train_frames();
        if frames.is_empty() {
            return Err(TrainError::NoTrainingFrames);
        }
        let lidar_points: Vec<Vector3<f64>> =
            frames.iter().filter_map(|f| f.lidar.as_ref()).flat_map(|s| s.points.iter().copied()).collect();
        let train = frames
            .iter()
            .map(|f| {
                let view = manifest.view(f);
                let depth = render_depth(&lidar_points, &view, cfg.top_mask_rows);
                let depth_dense = complete_depth(&depth).unwrap_or_else(|_| depth.clone());
                FrameData { frame_id: f.frame_id, view, image: f.image.clone(), depth, depth_dense }
            })
            .collect::<Vec<_>>();
        let test = manifest
            .test_frames()
            .iter()
            .map(|f| TestView { frame_id: f.frame_id, view: manifest.view(f), image: f.image.clone() })
            .collect();
        let extent = camera_extent(&train.iter().map(|f| f.view.pose.center()).collect::<Vec<_>>());
        Ok(Self { train, test, lidar_points, extent, top_mask_rows: cfg.top_mask_rows })
    }

    /// Indices of the training frames before and after `idx`; the single
    /// neighbour is used twice at either end of the sequence.
    pub fn neighbours(&self, idx: usize) -> (usize, usize) {
        let n = self.train.len();
        match (idx.checked_sub(1), (idx + 1 < n).then_some(idx + 1)) {
            (Some(p), Some(q)) => (p, q),
            (Some(p), None) => (p, p),
            (None, Some(q)) => (q, q),
            (None, None) => (idx, idx),
        }
    }
}

/// 1.1 times the largest camera distance from the mean camera center; 1 when
/// all cameras coincide.
pub fn camera_extent(centers: &[Vector3<f64>]) -> f64 {
    if centers.is_empty() {
        return 1.0;
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max) * 1.1;
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// LiDAR-only initialization: colorize each training sweep by its own
/// image, merge, voxel-downsample, one Gaussian per point.
pub fn initial_cloud(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<GaussianCloud, TrainError> {
    let mut colored = Vec::new();
    for f in manifest.train_frames() {
        let Some(sweep) = &f.lidar else { continue };
        match colorize_sweep(sweep, &manifest.view(f), &f.image) {
            Ok(c) => colored.push(c),
            Err(LidarError::EmptyResult) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if colored.is_empty() {
        return Err(TrainError::NoInitPoints);
    }
    let points = accumulate_and_downsample(&colored, cfg.voxel_size)?;
    Ok(init_from_points(&points, cfg.init_opacity, cfg.sh_degree)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventStatus {
    Applied(PseudoTerms),
    /// The provider failed; the event was dropped and training continued.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub iter: u64,
    pub anchor_frame: u32,
    pub status: EventStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iter: u64,
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub stats: GradStats,
    pub events: Vec<EventRecord>,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud) -> Self {
        let (n, stride) = (cloud.len(), cloud.sh_stride());
        Self { iter: 0, cloud, adam: AdamState::new(n, stride), stats: GradStats::new(n), events: Vec::new() }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot { iter: self.iter, adam: self.adam.clone(), stats: self.stats.clone() }
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(SceneError::from)?;
        save_checkpoint(&self.cloud, self.iter, &dir.join(CHECKPOINT_FILE))?;
        save_state(&self.snapshot(), &dir.join(STATE_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let (cloud, iter) = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        let state_path = dir.join(STATE_FILE);
        let snap = load_state(&state_path)?;
        if snap.iter != iter || snap.adam.len() != cloud.len() || snap.stats.len() != cloud.len() {
            return Err(TrainError::StateMismatch { state: state_path, state_iter: snap.iter, checkpoint_iter: iter });
        }
        Ok(Self { iter, cloud, adam: snap.adam, stats: snap.stats, events: Vec::new() })
    }
}

/// One training-view step: render, reconstruction loss, backward pass and
/// an optimizer update. Increments `state.iter`.
pub fn train_step(state: &mut TrainState, data: &TrainData, frame: usize, cfg: &TrainConfig) -> Result<LossReport, TrainError> {
    let f = &data.train[frame];
    let out = render(&state.cloud, &f.view, &cfg.render_settings(state.iter));
    let recon = recon_loss(&out, &f.image, &f.depth, &cfg.weights)?;
    let grads = render_backward(&state.cloud, &f.view, &out, &recon.grad.color, &recon.grad.depth)?;
    if !grads.is_finite() {
        return Err(TrainError::NonFinite(state.iter));
    }
    if cfg.densify.enabled && state.iter + 1 < cfg.densify.until_iter as u64 {
        for (i, visible) in grads.visible.iter().enumerate() {
            if *visible {
                state.stats.accum[i] += grads.screen_grad_norm[i];
                state.stats.count[i] += 1;
            }
        }
    }
    let rates = cfg.lr.at(state.iter, cfg.total_iters, data.extent);
    state.adam.apply(&mut state.cloud, &grads, &rates);
    state.iter += 1;
    Ok(LossReport::new(&recon, None, &cfg.weights))
}

/// Guidance requests of one event, before any provider is called.
pub fn build_requests(
    state: &TrainState,
    data: &TrainData,
    anchor: usize,
    cfg: &TrainConfig,
) -> Vec<(GuidanceRequest, crate::rasterizer::RenderOutput, DepthMap)> {
    let (prev, next) = data.neighbours(anchor);
    let (a, p, q) = (&data.train[anchor], &data.train[prev], &data.train[next]);
    let views = sample_pseudo_views(&a.view, &p.view, &q.view, &cfg.pseudo, &mut stream(cfg.seed ^ cfg.pseudo.seed, STREAM_VIEWS, state.iter));
    let schedule = cfg.run_schedule();
    let mut strength_rng = stream(cfg.seed, STREAM_STRENGTH, state.iter);
    let settings = cfg.render_settings(state.iter);
    let m = cfg.pseudo.count_per_event as u64;
    views
        .into_iter()
        .enumerate()
        .map(|(j, view)| {
            let (strength, t) = sample_strength(&schedule, state.iter, &mut strength_rng);
            let out = render(&state.cloud, &view, &settings);
            let depth = render_depth(&data.lidar_points, &view, data.top_mask_rows);
            let depth_target = complete_depth(&depth).unwrap_or_else(|_| depth.clone());
            let request_id = state.iter * m + j as u64;
            let req = GuidanceRequest {
                request_id,
                rendered: out.color.clone(),
                ref_prev: p.image.clone(),
                ref_next: q.image.clone(),
                depth_target,
                depth_prev: p.depth_dense.clone(),
                depth_next: q.depth_dense.clone(),
                strength,
                t,
                t_max: schedule.t_max,
                seed: derive_seed(cfg.seed, STREAM_NOISE, request_id),
                view: Some(view),
            };
            (req, out, depth)
        })
        .collect()
}

/// Samples `M` pseudo views around the anchor frame, obtains guidance for
/// each, and applies `lambda_pseudo` times the mean pseudo loss gradient
/// with the shared optimizer. Does not advance `state.iter`.
///
/// Refused before the warm-up ends or off the cadence. With
/// `lambda_pseudo == 0` nothing is requested or updated and `None` is
/// returned. A provider error leaves the state untouched.
pub fn pseudo_event(
    state: &mut TrainState,
    data: &TrainData,
    anchor: usize,
    cfg: &TrainConfig,
    provider: &dyn GuidanceProvider,
) -> Result<Option<PseudoTerms>, TrainError> {
    if state.iter < cfg.warmup_iters {
        return Err(TrainError::EventRefused { iter: state.iter, reason: format!("warm-up lasts {} iterations", cfg.warmup_iters) });
    }
    if state.iter % cfg.pseudo.cadence as u64 != 0 {
        return Err(TrainError::EventRefused { iter: state.iter, reason: format!("not a multiple of {}", cfg.pseudo.cadence) });
    }
    if cfg.weights.lambda_pseudo == 0.0 {
        return Ok(None);
    }
    let items = build_requests(state, data, anchor, cfg);
    let guidance: Vec<Image> = if cfg.deterministic {
        items.iter().map(|(req, _, _)| make_guidance(req, provider).map(|r| r.guidance)).collect::<Result<_, _>>()?
    } else {
        items.par_iter().map(|(req, _, _)| make_guidance(req, provider).map(|r| r.guidance)).collect::<Result<_, _>>()?
    };

    let mut total = GradientBuffer::zeros(state.cloud.len(), state.cloud.sh_stride());
    let mut terms = Vec::with_capacity(items.len());
    let weight = cfg.weights.lambda_pseudo / items.len() as f64;
    for ((req, out, depth), g) in items.iter().zip(&guidance) {
        let loss = pseudo_loss(out, g, depth, &cfg.weights)?;
        let view = req.view.expect("pseudo requests carry their view");
        let grads = render_backward(&state.cloud, &view, out, &loss.grad.color, &loss.grad.depth)?;
        total.add_scaled(&grads, weight);
        terms.push(loss.terms);
    }
    if !total.is_finite() {
        return Err(TrainError::NonFinite(state.iter));
    }
    let rates = cfg.lr.at(state.iter, cfg.total_iters, data.extent);
    state.adam.apply(&mut state.cloud, &total, &rates);
    Ok(PseudoTerms::mean(&terms))
}

/// Density control and opacity reset after the step that completed
/// iteration `state.iter`.
fn density_control(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig) {
    let d = &cfg.densify;
    let it = state.iter;
    if !d.enabled || it >= d.until_iter as u64 {
        return;
    }
    if it > d.from_iter as u64 && it % d.interval as u64 == 0 {
        let outcome = densify_and_prune(&state.cloud, &state.stats, d, data.extent, &mut stream(cfg.seed, STREAM_DENSIFY, it));
        state.adam.remap(&outcome.origin, state.cloud.sh_stride());
        state.cloud = outcome.cloud;
        state.stats.reset(state.cloud.len());
        log::debug!(
            "iter {it}: cloned {} split {} pruned {} -> {} gaussians",
            outcome.cloned,
            outcome.split,
            outcome.pruned,
            state.cloud.len()
        );
    }
    if d.opacity_reset_interval > 0 && it % d.opacity_reset_interval as u64 == 0 {
        reset_opacity(&mut state.cloud, OPACITY_RESET_VALUE);
        state.adam.reset_opacity_moments();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub iter: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub views: usize,
}

/// Mean PSNR / SSIM / perceptual proxy over the held-out views.
pub fn evaluate(cloud: &GaussianCloud, data: &TrainData, cfg: &TrainConfig, iter: u64) -> Result<Option<EvalRow>, TrainError> {
    if data.test.is_empty() {
        return Ok(None);
    }
    let settings = cfg.render_settings(iter);
    let (mut p, mut s, mut q) = (0.0, 0.0, 0.0);
    for t in &data.test {
        let img = render(cloud, &t.view, &settings).color;
        p += psnr(&img, &t.image)?;
        s += ssim(&img, &t.image)?;
        q += perceptual_proxy(&img, &t.image)?;
    }
    let n = data.test.len() as f64;
    Ok(Some(EvalRow { iter, psnr: p / n, ssim: s / n, perceptual: q / n, views: data.test.len() }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Index of the iteration (0-based).
    pub iter: u64,
    pub frame_id: u32,
    pub lr: f64,
    pub report: LossReport,
    pub gaussians: usize,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRow>,
}

impl MetricsHistory {
    pub fn final_eval(&self) -> Option<&EvalRow> {
        self.evals.last()
    }

    /// Tab-separated per-iteration losses.
    pub fn steps_tsv(&self) -> String {
        let mut s = String::from(
            "iter\tframe\tlr\ttotal\trecon_l1\trecon_ssim\trecon_depth\tpseudo_l1\tpseudo_perceptual\tpseudo_depth\tgaussians\tevent\n",
        );
        for r in &self.steps {
            let p = &r.report;
            let _ = writeln!(
                s,
                "{}\t{}\t{:e}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.iter,
                r.frame_id,
                r.lr,
                p.total,
                p.recon_l1,
                p.recon_ssim,
                p.recon_depth,
                p.pseudo_l1,
                p.pseudo_perceptual,
                p.pseudo_depth,
                r.gaussians,
                u8::from(r.event)
            );
        }
        s
    }

    pub fn evals_tsv(&self) -> String {
        let mut s = String::from("iter\tpsnr\tssim\tperceptual-proxy\tviews\n");
        for e in &self.evals {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", e.iter, e.psnr, e.ssim, e.perceptual, e.views);
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where periodic checkpoints go (and where a resume reads from).
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once this many iterations are complete, without a final
    /// checkpoint, as if the process had been killed.
    pub stop_after: Option<u64>,
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: MetricsHistory,
    /// False when the run ended early through `stop_after`.
    pub completed: bool,
}

impl TrainOutcome {
    pub fn cloud(&self) -> &GaussianCloud {
        &self.state.cloud
    }
}

pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, provider: &dyn GuidanceProvider) -> Result<TrainOutcome, TrainError> {
    train_with(manifest, cfg, provider, &TrainOptions::default())
}

pub fn train_with(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    provider: &dyn GuidanceProvider,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let data = TrainData::prepare(manifest, cfg)?;
    let state = match (&opts.checkpoint_dir, opts.resume) {
        (Some(dir), true) => {
            let s = TrainState::load(dir)?;
            info!("resuming from {} at iteration {}", dir.display(), s.iter);
            s
        }
        (None, true) => return Err(TrainError::Config("resume needs a checkpoint directory".into())),
        _ => TrainState::new(initial_cloud(manifest, cfg)?),
    };
    run(state, &data, cfg, provider, opts)
}

/// Runs the loop from `state.iter` to `cfg.total_iters`.
pub fn run(
    mut state: TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    provider: &dyn GuidanceProvider,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    let mut history = MetricsHistory::default();
    match run_loop(&mut state, &mut history, data, cfg, provider, opts) {
        Ok(completed) => {
            if completed {
                if let Some(row) = evaluate(&state.cloud, data, cfg, state.iter)? {
                    if history.evals.last().map(|e| e.iter) != Some(row.iter) {
                        history.evals.push(row);
                    }
                }
                if let Some(dir) = &opts.checkpoint_dir {
                    state.save(dir)?;
                }
            }
            Ok(TrainOutcome { state, history, completed })
        }
        Err(e) => {
            if let Some(dir) = &opts.checkpoint_dir {
                if let Err(save_err) = state.save(dir) {
                    warn!("could not checkpoint after error: {save_err}");
                }
            }
            Err(e)
        }
    }
}

fn run_loop(
    state: &mut TrainState,
    history: &mut MetricsHistory,
    data: &TrainData,
    cfg: &TrainConfig,
    provider: &dyn GuidanceProvider,
    opts: &TrainOptions,
) -> Result<bool, TrainError> {
    let n = data.train.len();
    let mut order: Option<(u64, Vec<usize>)> = None;
    while state.iter < cfg.total_iters {
        if opts.stop_after.is_some_and(|s| state.iter >= s) {
            return Ok(false);
        }
        let it = state.iter;
        let epoch = it / n as u64;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(cfg.seed, epoch, n)));
        }
        let frame = order.as_ref().expect("order initialized").1[(it % n as u64) as usize];

        let mut pseudo = None;
        let mut event = false;
        if cfg.is_event_iter(it) && cfg.weights.lambda_pseudo != 0.0 {
            event = true;
            let anchor_frame = data.train[frame].frame_id;
            match pseudo_event(state, data, frame, cfg, provider) {
                Ok(terms) => {
                    pseudo = terms;
                    if let Some(t) = terms {
                        state.events.push(EventRecord { iter: it, anchor_frame, status: EventStatus::Applied(t) });
                    }
                }
                Err(TrainError::Guidance(e)) => {
                    warn!("iter {it}: pseudo event skipped: {e}");
                    state.events.push(EventRecord { iter: it, anchor_frame, status: EventStatus::Failed(e.to_string()) });
                }
                Err(e) => return Err(e),
            }
        }

        let lr = cfg.lr.at(it, cfg.total_iters, data.extent).means;
        let recon = train_step(state, data, frame, cfg)?;
        let report = LossReport {
            pseudo_l1: pseudo.map_or(0.0, |p| p.l1),
            pseudo_perceptual: pseudo.map_or(0.0, |p| p.perceptual),
            pseudo_depth: pseudo.map_or(0.0, |p| p.depth),
            ..recon
        };
        let report = LossReport { total: report.recompose(&cfg.weights), ..report };
        density_control(state, data, cfg);
        history.steps.push(StepRecord {
            iter: it,
            frame_id: data.train[frame].frame_id,
            lr,
            report,
            gaussians: state.cloud.len(),
            event,
        });

        let done = state.iter;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.total_iters) {
            info!(
                "iter {done} lr {lr:.4e} total {:.5} recon_l1 {:.5} recon_ssim {:.5} recon_depth {:.5} pseudo_l1 {:.5} pseudo_perceptual {:.5} pseudo_depth {:.5} gaussians {}",
                report.total,
                report.recon_l1,
                report.recon_ssim,
                report.recon_depth,
                report.pseudo_l1,
                report.pseudo_perceptual,
                report.pseudo_depth,
                state.cloud.len()
            );
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            if let Some(row) = evaluate(&state.cloud, data, cfg, done)? {
                info!("eval iter {done} psnr {:.3} ssim {:.4} perceptual-proxy {:.5}", row.psnr, row.ssim, row.perceptual);
                history.evals.push(row);
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_iters {
                state.save(dir)?;
            }
        }
    }
    Ok(true)
}
