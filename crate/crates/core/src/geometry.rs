//! Pinhole cameras, rigid poses and the pseudo-view sampler.
//!
//! Conventions: poses are stored camera-to-world; the camera frame is
//! x-right, y-down, z-forward; the world frame is z-up, so "yaw" is a
//! rotation about world z.

use nalgebra::{Matrix3, Point3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pseudo-view config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from a raw quaternion `(w, x, y, z)`, renormalizing it.
    pub fn from_wxyz(q: [f64; 4], translation: [f64; 3]) -> Self {
        let rotation = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Self { rotation, translation: Vector3::from(translation) }
    }

    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self { rotation: UnitQuaternion::from_rotation_matrix(&rot), translation }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// World-to-camera rotation and translation.
    pub fn world_to_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotation_matrix().transpose();
        let t = -(r * self.translation);
        (r, t)
    }

    pub fn transform_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    pub fn transform_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transform_vector(p) + self.translation
    }

    /// Camera that sits at `center` looking along world direction `forward`,
    /// with the image "up" as close to world +z as possible.
    pub fn looking_along(center: Vector3<f64>, forward: Vector3<f64>) -> Self {
        let z = forward.normalize();
        let up = Vector3::z();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let m = Matrix3::from_columns(&[x, y, z]);
        Self::from_matrix(&m, center)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Result<Self, GeometryError> {
        intrinsics.validate()?;
        Ok(Self { intrinsics, pose })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn with_pose(&self, pose: Pose) -> Self {
        Self { intrinsics: self.intrinsics, pose }
    }
}

/// Projects a world point into continuous pixel coordinates. Pixel `(i, j)`
/// covers `[i, i+1) x [j, j+1)`.
pub fn project(view: &CameraView, point_world: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
    let pc = view.pose.transform_to_camera(point_world);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let k = &view.intrinsics;
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    Ok((Vector2::new(u, v), pc.z))
}

pub fn unproject(view: &CameraView, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let k = &view.intrinsics;
    let pc = Vector3::new((pixel.x - k.cx) / k.fx * depth, (pixel.y - k.cy) / k.fy * depth, depth);
    Ok(view.pose.transform_to_world(&pc))
}

/// Spherical-linear interpolation along the shorter arc.
pub fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, u: f64) -> UnitQuaternion<f64> {
    if u <= 0.0 {
        return *a;
    }
    if u >= 1.0 {
        return *b;
    }
    let qa = a.coords;
    let mut qb = b.coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 0.9995 {
        qa * (1.0 - u) + qb * u
    } else {
        let theta = dot.clamp(-1.0, 1.0).acos();
        let s = theta.sin();
        qa * (((1.0 - u) * theta).sin() / s) + qb * ((u * theta).sin() / s)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(coords))
}

/// Linear translation, shortest-arc rotation.
pub fn interpolate_pose(a: &Pose, b: &Pose, u: f64) -> Pose {
    if u <= 0.0 {
        return *a;
    }
    if u >= 1.0 {
        return *b;
    }
    Pose {
        rotation: slerp(&a.rotation, &b.rotation, u),
        translation: a.translation * (1.0 - u) + b.translation * u,
    }
}

/// Rotation angle in radians between two orientations.
pub fn rotation_angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.angle_to(b)
}

/// Rotates the camera orientation about the world up axis, keeping its center.
pub fn apply_yaw(pose: &Pose, yaw: f64) -> Pose {
    let q_yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
    let q = q_yaw.into_inner() * pose.rotation.into_inner();
    Pose { rotation: UnitQuaternion::new_unchecked(q), translation: pose.translation }
}

/// Yaw of `pose` relative to `reference`, wrapped to `(-pi, pi]`. Only
/// meaningful when the two differ by a rotation about world z.
pub fn relative_yaw(reference: &Pose, pose: &Pose) -> f64 {
    let fwd_ref = reference.rotation * Vector3::z();
    let fwd = pose.rotation * Vector3::z();
    let a = fwd_ref.y.atan2(fwd_ref.x);
    let b = fwd.y.atan2(fwd.x);
    let mut d = b - a;
    while d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    while d <= -std::f64::consts::PI {
        d += 2.0 * std::f64::consts::PI;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoViewConfig {
    /// Yaw bound in radians.
    pub delta_max: f64,
    pub count_per_event: usize,
    pub cadence: usize,
    pub seed: u64,
}

impl Default for PseudoViewConfig {
    fn default() -> Self {
        Self { delta_max: 15f64.to_radians(), count_per_event: 4, cadence: 10, seed: 0 }
    }
}

impl PseudoViewConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(0.0..=std::f64::consts::PI).contains(&self.delta_max) {
            return Err(GeometryError::InvalidConfig(format!("delta_max {} outside [0, pi]", self.delta_max)));
        }
        if self.count_per_event == 0 || self.cadence == 0 {
            return Err(GeometryError::InvalidConfig("count_per_event and cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pseudo view on the segment `anchor -> other` at parameter `u`, with the
/// anchor orientation yawed by `yaw` radians.
pub fn pseudo_view_at(anchor: &CameraView, other: &CameraView, u: f64, yaw: f64) -> CameraView {
    let a = anchor.pose.translation;
    let translation = a + (other.pose.translation - a) * u;
    let yawed = apply_yaw(&anchor.pose, yaw);
    CameraView { intrinsics: anchor.intrinsics, pose: Pose { rotation: yawed.rotation, translation } }
}

/// Draws `cfg.count_per_event` pseudo views around `anchor`. Positions lie on
/// the segment towards `prev` or `next` (equal odds), yaw offsets are uniform
/// in `[-delta_max, delta_max]`.
pub fn sample_pseudo_views<R: Rng + ?Sized>(
    anchor: &CameraView,
    prev: &CameraView,
    next: &CameraView,
    cfg: &PseudoViewConfig,
    rng: &mut R,
) -> Vec<CameraView> {
    (0..cfg.count_per_event)
        .map(|_| {
            let other = if rng.random::<bool>() { prev } else { next };
            let u: f64 = rng.random();
            let yaw = cfg.delta_max * (2.0 * rng.random::<f64>() - 1.0);
            pseudo_view_at(anchor, other, u, yaw)
        })
        .collect()
}

/// Evaluation-style novel view: yaw magnitude drawn from `[yaw_min, yaw_max]`
/// with random sign, plus isotropic horizontal position jitter of up to
/// `jitter` meters.
pub fn sample_eval_view<R: Rng + ?Sized>(
    base: &CameraView,
    yaw_min: f64,
    yaw_max: f64,
    jitter: f64,
    rng: &mut R,
) -> CameraView {
    let mag = yaw_min + (yaw_max - yaw_min) * rng.random::<f64>();
    let yaw = if rng.random::<bool>() { mag } else { -mag };
    let mut pose = apply_yaw(&base.pose, yaw);
    if jitter > 0.0 {
        let ang = rng.random::<f64>() * std::f64::consts::TAU;
        let r = jitter * rng.random::<f64>();
        pose.translation += Vector3::new(r * ang.cos(), r * ang.sin(), 0.0);
    }
    base.with_pose(pose)
}

pub fn point3(p: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*p)
}
