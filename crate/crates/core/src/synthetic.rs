//! Procedural street scene with a ground-truth Gaussian cloud, rendered
//! training / held-out images and simulated LiDAR sweeps.
//!
//! World frame is z-up; the street runs along +x between two facades.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gaussians::{logit, Gaussian, GaussianCloud};
use crate::geometry::{apply_yaw, CameraView, Intrinsics, Pose};
use crate::lidar::PointSweep;
use crate::rasterizer::{render, RenderSettings};
use crate::scene_io::{default_cam_from_ego, DatasetManifest, Split, TrainingFrame};
use crate::sh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub train_views: usize,
    pub test_views: usize,
    /// Distance between consecutive training cameras (m).
    pub view_spacing: f64,
    pub camera_height: f64,
    pub test_yaw_min_deg: f64,
    pub test_yaw_max_deg: f64,
    /// Surface sampling step of the ground-truth Gaussians (m).
    pub surfel_spacing: f64,
    pub street_half_width: f64,
    pub facade_height: f64,
    pub lidar_azimuth_steps: usize,
    pub lidar_beams: usize,
    pub lidar_elevation_min_deg: f64,
    pub lidar_elevation_max_deg: f64,
    pub lidar_max_range: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 40,
            focal: 40.0,
            train_views: 20,
            test_views: 8,
            view_spacing: 0.8,
            camera_height: 1.6,
            test_yaw_min_deg: 15.0,
            test_yaw_max_deg: 30.0,
            surfel_spacing: 0.5,
            street_half_width: 9.0,
            facade_height: 8.0,
            lidar_azimuth_steps: 240,
            lidar_beams: 32,
            lidar_elevation_min_deg: -25.0,
            lidar_elevation_max_deg: 10.0,
            lidar_max_range: 40.0,
            background: [0.55, 0.7, 0.9],
            seed: 0,
        }
    }
}

/// Axis-aligned box standing on the ground.
#[derive(Debug, Clone, Copy)]
struct Block {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    color: [f64; 3],
}

pub struct SyntheticScene {
    pub config: SyntheticConfig,
    pub ground_truth: GaussianCloud,
    pub manifest: DatasetManifest,
}

impl SyntheticScene {
    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings { sh_degree: 0, background: self.config.background, parallel: true }
    }

    /// Ground-truth image of an arbitrary view.
    pub fn render_truth(&self, view: &CameraView) -> crate::pixels::Image {
        render(&self.ground_truth, view, &self.render_settings()).color
    }
}

struct Layout {
    x_min: f64,
    x_max: f64,
    blocks: Vec<Block>,
}

fn facade_color(x: f64, z: f64, seed_colors: &[[f64; 3]]) -> [f64; 3] {
    let building = ((x + 100.0) / 6.0).floor() as usize % seed_colors.len();
    let base = seed_colors[building];
    let wx = (x + 100.0).rem_euclid(1.5);
    let floor_z = z.rem_euclid(2.5);
    let window = (0.4..1.1).contains(&wx) && (1.0..1.9).contains(&floor_z) && z > 0.8;
    if window {
        [0.15, 0.2, 0.3]
    } else if z < 0.4 {
        base.map(|c| c * 0.6)
    } else {
        base
    }
}

fn ground_color(x: f64, y: f64, road_half: f64) -> [f64; 3] {
    if y.abs() < 0.12 && (x + 100.0).rem_euclid(3.0) < 1.5 {
        [0.95, 0.95, 0.9]
    } else if y.abs() < road_half {
        [0.28, 0.28, 0.3]
    } else if y.abs() < road_half + 0.3 {
        [0.75, 0.75, 0.72]
    } else {
        [0.6, 0.56, 0.5]
    }
}

fn surfel(center: Vector3<f64>, normal_rot: UnitQuaternion<f64>, tangent: f64, color: [f64; 3]) -> Gaussian {
    let q = normal_rot.quaternion();
    Gaussian {
        mean: center.map(|v| v as f32).into(),
        log_scale: [tangent.ln() as f32, tangent.ln() as f32, 0.03f64.ln() as f32],
        rotation: [q.w as f32, q.i as f32, q.j as f32, q.k as f32],
        opacity_logit: logit(0.97) as f32,
        sh: color.iter().map(|c| sh::rgb_to_dc(*c) as f32).collect(),
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    let k = 1.0 + amount * (2.0 * rng.random::<f64>() - 1.0);
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// Rotation taking local +z onto `normal`.
fn facing(normal: Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vector3::z(), &normal)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI))
}

fn build_cloud(cfg: &SyntheticConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let mut cloud = GaussianCloud::new(0).expect("degree 0 is supported");
    let step = cfg.surfel_spacing;
    let tangent = step * 0.6;
    let hw = cfg.street_half_width;
    let road_half = hw * 0.45;
    let palette: Vec<[f64; 3]> = (0..6)
        .map(|_| [rng.random_range(0.45..0.9), rng.random_range(0.35..0.8), rng.random_range(0.3..0.7)])
        .collect();
    let nx = ((layout.x_max - layout.x_min) / step).ceil() as usize;
    let ny = (2.0 * hw / step).ceil() as usize;
    for i in 0..nx {
        let x = layout.x_min + (i as f64 + 0.5) * step;
        for j in 0..ny {
            let y = -hw + (j as f64 + 0.5) * step;
            let c = jitter(rng, ground_color(x, y, road_half), 0.08);
            cloud.push(&surfel(Vector3::new(x, y, 0.0), UnitQuaternion::identity(), tangent, c));
        }
        let nz = (cfg.facade_height / step).ceil() as usize;
        for side in [-1.0, 1.0] {
            for k in 0..nz {
                let z = (k as f64 + 0.5) * step;
                let c = jitter(rng, facade_color(x + side * 50.0, z, &palette), 0.06);
                cloud.push(&surfel(Vector3::new(x, side * hw, z), facing(Vector3::new(0.0, -side, 0.0)), tangent, c));
            }
        }
    }
    for b in &layout.blocks {
        let size = b.hi - b.lo;
        let faces: [(Vector3<f64>, usize, usize, Vector3<f64>); 5] = [
            (Vector3::z(), 0, 1, Vector3::new(b.lo.x, b.lo.y, b.hi.z)),
            (Vector3::x(), 1, 2, Vector3::new(b.hi.x, b.lo.y, b.lo.z)),
            (-Vector3::x(), 1, 2, Vector3::new(b.lo.x, b.lo.y, b.lo.z)),
            (Vector3::y(), 0, 2, Vector3::new(b.lo.x, b.hi.y, b.lo.z)),
            (-Vector3::y(), 0, 2, Vector3::new(b.lo.x, b.lo.y, b.lo.z)),
        ];
        for (normal, a1, a2, origin) in faces {
            let n1 = (size[a1] / step).ceil().max(1.0) as usize;
            let n2 = (size[a2] / step).ceil().max(1.0) as usize;
            for u in 0..n1 {
                for v in 0..n2 {
                    let mut p = origin;
                    p[a1] += (u as f64 + 0.5) * size[a1] / n1 as f64;
                    p[a2] += (v as f64 + 0.5) * size[a2] / n2 as f64;
                    let shade = if normal.z > 0.5 { 1.0 } else { 0.8 };
                    let c = jitter(rng, b.color.map(|v| v * shade), 0.05);
                    cloud.push(&surfel(p, facing(normal), tangent, c));
                }
            }
        }
    }
    cloud
}

/// Distance along the ray to the first scene surface, if any within range.
fn cast(origin: &Vector3<f64>, dir: &Vector3<f64>, cfg: &SyntheticConfig, layout: &Layout) -> Option<f64> {
    let mut best = cfg.lidar_max_range;
    let mut hit = false;
    let mut consider = |t: f64, ok: bool| {
        if ok && t > 1e-6 && t < best {
            best = t;
            hit = true;
        }
    };
    let hw = cfg.street_half_width;
    if dir.z < 0.0 {
        let t = -origin.z / dir.z;
        let p = origin + dir * t;
        consider(t, p.x >= layout.x_min && p.x <= layout.x_max && p.y.abs() <= hw);
    }
    for side in [-1.0, 1.0] {
        if dir.y * side > 0.0 {
            let t = (side * hw - origin.y) / dir.y;
            let p = origin + dir * t;
            consider(t, p.x >= layout.x_min && p.x <= layout.x_max && p.z >= 0.0 && p.z <= cfg.facade_height);
        }
    }
    for b in &layout.blocks {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        let mut inside = true;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < b.lo[a] || origin[a] > b.hi[a] {
                    inside = false;
                }
                continue;
            }
            let (ta, tb) = ((b.lo[a] - origin[a]) / dir[a], (b.hi[a] - origin[a]) / dir[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        if inside && t0 <= t1 {
            consider(t0, true);
        }
    }
    hit.then_some(best)
}

fn lidar_sweep(pose: &Pose, cfg: &SyntheticConfig, layout: &Layout, frame: u32) -> PointSweep {
    let (cam_from_ego, _) = default_cam_from_ego();
    let world_from_ego = pose.rotation_matrix() * cam_from_ego;
    let origin = pose.translation;
    let mut points = Vec::new();
    for b in 0..cfg.lidar_beams {
        let f = if cfg.lidar_beams > 1 { b as f64 / (cfg.lidar_beams - 1) as f64 } else { 0.5 };
        let el = (cfg.lidar_elevation_min_deg + f * (cfg.lidar_elevation_max_deg - cfg.lidar_elevation_min_deg)).to_radians();
        for a in 0..cfg.lidar_azimuth_steps {
            let az = a as f64 / cfg.lidar_azimuth_steps as f64 * std::f64::consts::TAU;
            let ego_dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dir = world_from_ego * ego_dir;
            if let Some(t) = cast(&origin, &dir, cfg, layout) {
                points.push(origin + dir * t);
            }
        }
    }
    PointSweep { points, source_frame: frame }
}

/// Builds the scene: 20 (by default) training cameras along the street and
/// held-out cameras between them, yawed by 15-30 degrees with alternating
/// sign. Training frames carry LiDAR; held-out frames do not.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let track = cfg.view_spacing * cfg.train_views.saturating_sub(1) as f64;
    let hw = cfg.street_half_width;
    let mut blocks = Vec::new();
    let mut x = 4.0 + rng.random_range(0.0..3.0);
    while x < track + 14.0 {
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y0 = side * rng.random_range(0.3..0.4) * hw;
        let len = rng.random_range(3.5..4.5);
        let wid = rng.random_range(1.6..2.0);
        let color = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        blocks.push(Block {
            lo: Vector3::new(x, y0 - wid / 2.0, 0.0),
            hi: Vector3::new(x + len, y0 + wid / 2.0, rng.random_range(1.3..1.7)),
            color,
        });
        x += len + rng.random_range(3.0..7.0);
    }
    let layout = Layout { x_min: -8.0, x_max: track + 30.0, blocks };
    let ground_truth = build_cloud(cfg, &layout, &mut rng);

    let intrinsics = Intrinsics::new(cfg.focal, cfg.focal, cfg.width as f64 / 2.0, cfg.height as f64 / 2.0, cfg.width, cfg.height)
        .expect("synthetic intrinsics are valid");
    let settings = RenderSettings { sh_degree: 0, background: cfg.background, parallel: true };
    let base = |x: f64| Pose::looking_along(Vector3::new(x, 0.0, cfg.camera_height), Vector3::x());
    let mut frames = Vec::new();
    let mut split = Split::default();
    for i in 0..cfg.train_views {
        let pose = base(i as f64 * cfg.view_spacing);
        let view = CameraView { intrinsics, pose };
        let image = render(&ground_truth, &view, &settings).color;
        let id = i as u32;
        frames.push(TrainingFrame { frame_id: id, image, pose, lidar: Some(lidar_sweep(&pose, cfg, &layout, id)) });
        split.train.push(id);
    }
    for k in 0..cfg.test_views {
        let f = (k as f64 + 0.5) / cfg.test_views as f64;
        let x = f * track;
        let mag = rng.random_range(cfg.test_yaw_min_deg..=cfg.test_yaw_max_deg).to_radians();
        let yaw = if k % 2 == 0 { mag } else { -mag };
        let pose = apply_yaw(&base(x), yaw);
        let view = CameraView { intrinsics, pose };
        let id = (cfg.train_views + k) as u32;
        frames.push(TrainingFrame { frame_id: id, image: render(&ground_truth, &view, &settings).color, pose, lidar: None });
        split.test.push(id);
    }
    let drop_rate = cfg.test_views as f64 / (cfg.train_views + cfg.test_views).max(1) as f64;
    SyntheticScene { config: *cfg, ground_truth, manifest: DatasetManifest { intrinsics, frames, split, drop_rate } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relative_yaw;

    #[test]
    fn default_scene_meets_size_contract() {
        let s = generate(&SyntheticConfig::default());
        assert!(s.ground_truth.len() >= 2000);
        assert_eq!(s.manifest.split.train.len(), 20);
        assert_eq!(s.manifest.split.test.len(), 8);
        let train0 = s.manifest.frame(0).unwrap().pose;
        for id in &s.manifest.split.test {
            let yaw = relative_yaw(&train0, &s.manifest.frame(*id).unwrap().pose).abs().to_degrees();
            assert!((15.0 - 1e-9..=30.0 + 1e-9).contains(&yaw), "yaw {yaw}");
        }
        assert!(s.manifest.train_frames().iter().all(|f| f.lidar.as_ref().is_some_and(|l| l.points.len() > 1000)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig { train_views: 3, test_views: 1, ..Default::default() };
        let (a, b) = (generate(&cfg), generate(&cfg));
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.manifest, b.manifest);
    }
}
