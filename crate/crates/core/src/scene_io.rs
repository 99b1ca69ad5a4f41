//! Dataset directories, train/test splits, checkpoints and TOML configs.
//!
//! Layout of a dataset root:
//!
//! ```text
//! images/000000.png      one PNG per frame
//! poses.txt              frame_id r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 (camera-to-world)
//! intrinsics.txt         fx fy cx cy width height
//! lidar/000000.bin       optional; little-endian f32 x y z intensity, ego frame
//! calib.txt              optional; 12 floats, camera-from-ego 3x4
//! split.txt              frame_id train|test
//! ```

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfmt::{self, FormatError};
use crate::gaussians::GaussianCloud;
use crate::geometry::{CameraView, Intrinsics, Pose};
use crate::lidar::PointSweep;
use crate::pixels::{Image, ImageError};
use crate::sh::SH_C0;

/// Allowed deviation of a pose rotation from orthonormality.
pub const ROTATION_TOLERANCE: f64 = 1e-6;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SGDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed pose for frame {frame}: {reason}")]
    MalformedPose { frame: u32, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("drop rate must lie in (0, 1), got {0}")]
    InvalidRate(f64),
    #[error("{file}:{line}: {message}")]
    Parse { file: PathBuf, line: usize, message: String },
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("config: {0}")]
    Config(String),
}

impl From<FormatError> for SceneError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(e) => SceneError::Io(e),
            FormatError::VersionMismatch { expected, found } => SceneError::VersionMismatch { expected, found },
            FormatError::BadMagic { found, .. } => {
                SceneError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("bad magic {found:?}")))
            }
            FormatError::Truncated(msg) => SceneError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, msg)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingFrame {
    pub frame_id: u32,
    pub image: Image,
    pub pose: Pose,
    /// World-frame sweep, if the frame has LiDAR.
    pub lidar: Option<PointSweep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

impl Split {
    /// Checks that `train` and `test` partition `ids`.
    pub fn validate(&self, ids: &[u32]) -> Result<(), SceneError> {
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.test) {
            if !seen.insert(*id) {
                return Err(SceneError::DimensionMismatch(format!("frame {id} appears in the split more than once")));
            }
            if !ids.contains(id) {
                return Err(SceneError::DimensionMismatch(format!("split names unknown frame {id}")));
            }
        }
        if let Some(id) = ids.iter().find(|id| !seen.contains(id)) {
            return Err(SceneError::DimensionMismatch(format!("frame {id} is in neither train nor test")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SplitScheme {
    Alternating,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub intrinsics: Intrinsics,
    pub frames: Vec<TrainingFrame>,
    pub split: Split,
    pub drop_rate: f64,
}

impl DatasetManifest {
    pub fn frame(&self, id: u32) -> Option<&TrainingFrame> {
        self.frames.iter().find(|f| f.frame_id == id)
    }

    pub fn view(&self, frame: &TrainingFrame) -> CameraView {
        CameraView { intrinsics: self.intrinsics, pose: frame.pose }
    }

    pub fn train_frames(&self) -> Vec<&TrainingFrame> {
        self.frames.iter().filter(|f| self.split.train.contains(&f.frame_id)).collect()
    }

    pub fn test_frames(&self) -> Vec<&TrainingFrame> {
        self.frames.iter().filter(|f| self.split.test.contains(&f.frame_id)).collect()
    }

    /// Replaces the split with a generated one over the frame order.
    pub fn resplit(&mut self, drop_rate: f64, scheme: SplitScheme) -> Result<(), SceneError> {
        let by_index = make_split(self.frames.len(), drop_rate, scheme)?;
        let ids = |v: &[u32]| v.iter().map(|&i| self.frames[i as usize].frame_id).collect::<Vec<_>>();
        self.split = Split { train: ids(&by_index.train), test: ids(&by_index.test) };
        self.drop_rate = drop_rate;
        Ok(())
    }
}

/// Splits frame indices `0..n` into train and test with
/// `|test| = round(drop_rate * n)`. The alternating scheme spaces test frames
/// evenly, ending each stride on a test frame (`n=4, rate=0.5 -> {1, 3}`).
pub fn make_split(n_frames: usize, drop_rate: f64, scheme: SplitScheme) -> Result<Split, SceneError> {
    if !(drop_rate > 0.0 && drop_rate < 1.0) {
        return Err(SceneError::InvalidRate(drop_rate));
    }
    let k = (drop_rate * n_frames as f64).round() as usize;
    let test: Vec<u32> = match scheme {
        SplitScheme::Alternating => {
            (0..k).map(|i| (((i + 1) * n_frames) / k - 1) as u32).collect()
        }
        SplitScheme::Random { seed } => {
            let mut idx: Vec<u32> = (0..n_frames as u32).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut t = idx[..k].to_vec();
            t.sort_unstable();
            t
        }
    };
    let train = (0..n_frames as u32).filter(|i| !test.contains(i)).collect();
    Ok(Split { train, test })
}

/// KITTI ego axes (x forward, y left, z up) to camera axes (x right, y down,
/// z forward), no offset.
pub fn default_cam_from_ego() -> (Matrix3<f64>, Vector3<f64>) {
    let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    (r, Vector3::zeros())
}

fn parse_floats(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>, SceneError> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| SceneError::Parse {
                file: path.to_path_buf(),
                line: line_no,
                message: format!("{t:?}: {e}"),
            })
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String, SceneError> {
    if !path.exists() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_intrinsics(path: &Path) -> Result<Intrinsics, SceneError> {
    let text = read_text(path)?;
    let (line_no, line) = content_lines(&text)
        .next()
        .ok_or_else(|| SceneError::Parse { file: path.to_path_buf(), line: 1, message: "empty file".into() })?;
    let v = parse_floats(path, line_no, line)?;
    if v.len() != 6 || v[4].fract() != 0.0 || v[5].fract() != 0.0 || v[4] < 1.0 || v[5] < 1.0 {
        return Err(SceneError::Parse {
            file: path.to_path_buf(),
            line: line_no,
            message: "expected fx fy cx cy width height".into(),
        });
    }
    Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize).map_err(|e| SceneError::Intrinsics(e.to_string()))
}

/// Rotation check: `R^T R = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
pub fn validate_rotation(r: &Matrix3<f64>) -> Result<(), String> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ROTATION_TOLERANCE {
        return Err(format!("rotation is not orthonormal (max deviation {err:.3e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(format!("rotation determinant is {det:.6}"));
    }
    Ok(())
}

fn parse_rigid(v: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    (r, Vector3::new(v[3], v[7], v[11]))
}

fn parse_poses(path: &Path) -> Result<Vec<(u32, Pose)>, SceneError> {
    let text = read_text(path)?;
    let mut out: Vec<(u32, Pose)> = Vec::new();
    for (line_no, line) in content_lines(&text) {
        let mut toks = line.split_whitespace();
        let id_tok = toks.next().unwrap_or_default();
        let id: u32 = id_tok.parse().map_err(|_| SceneError::Parse {
            file: path.to_path_buf(),
            line: line_no,
            message: format!("bad frame id {id_tok:?}"),
        })?;
        let v = parse_floats(path, line_no, &toks.collect::<Vec<_>>().join(" "))?;
        if v.len() != 12 {
            return Err(SceneError::MalformedPose { frame: id, reason: format!("expected 12 values, found {}", v.len()) });
        }
        let (r, t) = parse_rigid(&v);
        validate_rotation(&r).map_err(|reason| SceneError::MalformedPose { frame: id, reason })?;
        if let Some((prev, _)) = out.last() {
            if id <= *prev {
                return Err(SceneError::Parse {
                    file: path.to_path_buf(),
                    line: line_no,
                    message: format!("frame ids must increase strictly ({id} after {prev})"),
                });
            }
        }
        out.push((id, Pose::from_matrix(&r, t)));
    }
    Ok(out)
}

fn parse_split(path: &Path) -> Result<Split, SceneError> {
    let text = read_text(path)?;
    let mut split = Split::default();
    for (line_no, line) in content_lines(&text) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |message: String| SceneError::Parse { file: path.to_path_buf(), line: line_no, message };
        if toks.len() != 2 {
            return Err(bad("expected `<frame_id> train|test`".into()));
        }
        let id: u32 = toks[0].parse().map_err(|_| bad(format!("bad frame id {:?}", toks[0])))?;
        match toks[1] {
            "train" => split.train.push(id),
            "test" => split.test.push(id),
            other => return Err(bad(format!("unknown split {other:?}"))),
        }
    }
    Ok(split)
}

pub fn image_path(root: &Path, id: u32) -> PathBuf {
    root.join("images").join(format!("{id:06}.png"))
}

pub fn lidar_path(root: &Path, id: u32) -> PathBuf {
    root.join("lidar").join(format!("{id:06}.bin"))
}

/// Reads packed `x y z intensity` f32 records.
pub fn read_lidar_bin(path: &Path) -> Result<Vec<[f32; 4]>, SceneError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        return Err(SceneError::Parse {
            file: path.to_path_buf(),
            line: 0,
            message: format!("size {} is not a multiple of 16 bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| std::array::from_fn(|k| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]])))
        .collect())
}

pub fn write_lidar_bin(path: &Path, records: &[[f32; 4]]) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    binfmt::write_f32s(&mut w, records.iter().flatten().copied())?;
    w.flush()?;
    Ok(())
}

fn load_calib(root: &Path) -> Result<(Matrix3<f64>, Vector3<f64>), SceneError> {
    let path = root.join("calib.txt");
    if !path.exists() {
        return Ok(default_cam_from_ego());
    }
    let text = read_text(&path)?;
    let v: Vec<f64> = content_lines(&text)
        .map(|(n, l)| parse_floats(&path, n, l))
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    if v.len() != 12 {
        return Err(SceneError::Parse { file: path, line: 1, message: "expected 12 values".into() });
    }
    let (r, t) = parse_rigid(&v);
    validate_rotation(&r).map_err(|reason| SceneError::Parse { file: path.clone(), line: 1, message: reason })?;
    Ok((r, t))
}

/// Loads and validates a dataset directory. LiDAR sweeps are moved into world
/// coordinates; frames without a sweep file get `lidar: None`.
pub fn load_dataset(root: &Path) -> Result<DatasetManifest, SceneError> {
    let intrinsics = parse_intrinsics(&root.join("intrinsics.txt"))?;
    let poses = parse_poses(&root.join("poses.txt"))?;
    let split = parse_split(&root.join("split.txt"))?;
    let ids: Vec<u32> = poses.iter().map(|(id, _)| *id).collect();
    split.validate(&ids)?;
    let (cam_r, cam_t) = load_calib(root)?;
    let mut frames = Vec::with_capacity(poses.len());
    for (id, pose) in poses {
        let path = image_path(root, id);
        if !path.exists() {
            return Err(SceneError::MissingFile(path));
        }
        let image = Image::load_png(&path)?;
        if image.dims() != (intrinsics.width, intrinsics.height) {
            return Err(SceneError::DimensionMismatch(format!(
                "image {} is {:?}, intrinsics say {:?}",
                path.display(),
                image.dims(),
                (intrinsics.width, intrinsics.height)
            )));
        }
        let lp = lidar_path(root, id);
        let lidar = if lp.exists() {
            let points = read_lidar_bin(&lp)?
                .iter()
                .map(|r| {
                    let ego = Vector3::new(f64::from(r[0]), f64::from(r[1]), f64::from(r[2]));
                    pose.transform_to_world(&(cam_r * ego + cam_t))
                })
                .collect();
            Some(PointSweep::new(points, id).map_err(|e| SceneError::Parse {
                file: lp.clone(),
                line: 0,
                message: e.to_string(),
            })?)
        } else {
            None
        };
        frames.push(TrainingFrame { frame_id: id, image, pose, lidar });
    }
    let drop_rate = if frames.is_empty() { 0.0 } else { split.test.len() as f64 / frames.len() as f64 };
    Ok(DatasetManifest { intrinsics, frames, split, drop_rate })
}

fn rigid_line(r: &Matrix3<f64>, t: &Vector3<f64>) -> String {
    let v = [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z];
    v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
}

/// Writes a manifest in the layout read by [`load_dataset`], converting world
/// sweeps back to the ego frame with the default extrinsic.
pub fn save_dataset(root: &Path, manifest: &DatasetManifest) -> Result<(), SceneError> {
    fs::create_dir_all(root.join("images"))?;
    let k = &manifest.intrinsics;
    fs::write(root.join("intrinsics.txt"), format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height))?;
    let mut poses = String::new();
    let mut split = String::new();
    let (cam_r, cam_t) = default_cam_from_ego();
    for f in &manifest.frames {
        poses.push_str(&format!("{} {}\n", f.frame_id, rigid_line(&f.pose.rotation_matrix(), &f.pose.translation)));
        f.image.save_png(&image_path(root, f.frame_id))?;
        let role = if manifest.split.test.contains(&f.frame_id) { "test" } else { "train" };
        split.push_str(&format!("{} {role}\n", f.frame_id));
        if let Some(sweep) = &f.lidar {
            fs::create_dir_all(root.join("lidar"))?;
            let records: Vec<[f32; 4]> = sweep
                .points
                .iter()
                .map(|p| {
                    let ego = cam_r.transpose() * (f.pose.transform_to_camera(p) - cam_t);
                    [ego.x as f32, ego.y as f32, ego.z as f32, 1.0]
                })
                .collect();
            write_lidar_bin(&lidar_path(root, f.frame_id), &records)?;
        }
    }
    fs::write(root.join("poses.txt"), poses)?;
    fs::write(root.join("split.txt"), split)?;
    Ok(())
}

/// Writes `cloud` and the iteration counter. The file is written to a
/// temporary sibling and renamed, so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(cloud: &GaussianCloud, iter: u64, path: &Path) -> Result<(), SceneError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        binfmt::write_header(&mut w, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        binfmt::write_u64(&mut w, cloud.len() as u64)?;
        binfmt::write_u32(&mut w, cloud.sh_degree() as u32)?;
        binfmt::write_u64(&mut w, iter)?;
        binfmt::write_f32s(&mut w, cloud.means.iter().flatten().copied())?;
        binfmt::write_f32s(&mut w, cloud.log_scales.iter().flatten().copied())?;
        binfmt::write_f32s(&mut w, cloud.rotations.iter().flatten().copied())?;
        binfmt::write_f32s(&mut w, cloud.opacity_logits.iter().copied())?;
        binfmt::write_f32s(&mut w, cloud.sh.iter().copied())?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(GaussianCloud, u64), SceneError> {
    let mut r = BufReader::new(File::open(path)?);
    binfmt::read_header(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let n = binfmt::read_u64(&mut r)? as usize;
    let degree = binfmt::read_u32(&mut r)? as usize;
    let iter = binfmt::read_u64(&mut r)?;
    let mut cloud = GaussianCloud::new(degree)
        .map_err(|e| SceneError::Io(io::Error::new(io::ErrorKind::InvalidData, e.to_string())))?;
    let stride = cloud.sh_stride();
    let triples = |v: Vec<f32>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    cloud.means = triples(binfmt::read_f32s(&mut r, n.saturating_mul(3))?);
    cloud.log_scales = triples(binfmt::read_f32s(&mut r, n.saturating_mul(3))?);
    cloud.rotations =
        binfmt::read_f32s(&mut r, n.saturating_mul(4))?.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    cloud.opacity_logits = binfmt::read_f32s(&mut r, n)?;
    cloud.sh = binfmt::read_f32s(&mut r, n.saturating_mul(stride))?;
    binfmt::expect_eof(&mut r)?;
    Ok((cloud, iter))
}

/// ASCII PLY of Gaussian centers with their base (view-independent) color.
pub fn write_ply(cloud: &GaussianCloud, path: &Path) -> Result<(), SceneError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty float opacity\nend_header\n",
        cloud.len()
    )?;
    for i in 0..cloud.len() {
        let m = cloud.means[i];
        let dc = &cloud.sh_coeffs(i)[..3];
        let rgb = dc.iter().map(|c| ((f64::from(*c) * SH_C0 + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8).collect::<Vec<_>>();
        writeln!(w, "{} {} {} {} {} {} {}", m[0], m[1], m[2], rgb[0], rgb[1], rgb[2], cloud.opacity(i) as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, SceneError> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| SceneError::Config(e.to_string()))
}

pub fn save_config<T: Serialize>(cfg: &T, path: &Path) -> Result<(), SceneError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| SceneError::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}
