//! LiDAR initialization pipeline: colorize sweeps from their camera frames,
//! accumulate, voxel-downsample, and rasterize sparse / completed depth maps.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::binfmt::{self, FormatError};
use crate::geometry::{project, CameraView};
use crate::pixels::Image;

#[derive(Debug, Error)]
pub enum LidarError {
    #[error("no LiDAR point projects into the frame")]
    EmptyResult,
    #[error("depth map has no valid pixel below the masked rows")]
    NoValidPixels,
    #[error("non-finite point at index {0}")]
    NonFinitePoint(usize),
    #[error("voxel size must be positive, got {0}")]
    InvalidVoxelSize(f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// One sweep in world coordinates (after ego-pose compensation).
#[derive(Debug, Clone, PartialEq)]
pub struct PointSweep {
    pub points: Vec<Vector3<f64>>,
    pub source_frame: u32,
}

impl PointSweep {
    pub fn new(points: Vec<Vector3<f64>>, source_frame: u32) -> Result<Self, LidarError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(LidarError::NonFinitePoint(i));
        }
        Ok(Self { points, source_frame })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColoredPointCloud {
    pub points: Vec<ColoredPoint>,
}

impl ColoredPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> + '_ {
        self.points.iter().map(|p| &p.position)
    }
}

/// Nearest-pixel color lookup for every sweep point in front of the camera and
/// inside the image; the rest are dropped.
pub fn colorize_sweep(sweep: &PointSweep, view: &CameraView, image: &Image) -> Result<ColoredPointCloud, LidarError> {
    let (w, h) = (image.width(), image.height());
    let points: Vec<ColoredPoint> = sweep
        .points
        .iter()
        .filter_map(|p| {
            let (px, _) = project(view, p).ok()?;
            let (x, y) = (px.x.floor(), px.y.floor());
            if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                return None;
            }
            Some(ColoredPoint { position: *p, color: image.get(x as usize, y as usize) })
        })
        .collect();
    if points.is_empty() {
        return Err(LidarError::EmptyResult);
    }
    Ok(ColoredPointCloud { points })
}

/// Grid cell index of a position for the given voxel edge length.
pub fn voxel_key(p: &Vector3<f64>, voxel_size: f64) -> [i64; 3] {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

/// Concatenates the clouds (in order) and replaces every occupied voxel by
/// the centroid of its positions and the mean of its colors. Output is
/// sorted by voxel key.
pub fn accumulate_and_downsample(clouds: &[ColoredPointCloud], voxel_size: f64) -> Result<ColoredPointCloud, LidarError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(LidarError::InvalidVoxelSize(voxel_size));
    }
    let mut cells: HashMap<[i64; 3], (Vector3<f64>, [f64; 3], usize)> = HashMap::new();
    for p in clouds.iter().flat_map(|c| c.points.iter()) {
        let e = cells.entry(voxel_key(&p.position, voxel_size)).or_insert((Vector3::zeros(), [0.0; 3], 0));
        e.0 += p.position;
        for c in 0..3 {
            e.1[c] += p.color[c];
        }
        e.2 += 1;
    }
    let mut keyed: Vec<_> = cells.into_iter().collect();
    keyed.sort_unstable_by_key(|(k, _)| *k);
    let points = keyed
        .into_iter()
        .map(|(_, (sum, col, n))| {
            let inv = 1.0 / n as f64;
            ColoredPoint { position: sum * inv, color: col.map(|c| (c * inv).clamp(0.0, 1.0)) }
        })
        .collect();
    Ok(ColoredPointCloud { points })
}

/// Sparse or dense per-pixel depth with a validity mask. The top
/// `top_mask_rows` rows are always invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    top_mask_rows: usize,
}

impl DepthMap {
    pub fn empty(width: usize, height: usize, top_mask_rows: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
            top_mask_rows: top_mask_rows.min(height),
        }
    }

    /// Dense map from raw values; non-positive or non-finite entries and the
    /// masked rows become invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>, top_mask_rows: usize) -> Self {
        assert_eq!(values.len(), width * height);
        let mut map = Self::empty(width, height, top_mask_rows);
        for (i, v) in values.into_iter().enumerate() {
            if i / width >= map.top_mask_rows && v > 0.0 && v.is_finite() {
                map.values[i] = v;
                map.valid[i] = true;
            }
        }
        map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn top_mask_rows(&self) -> usize {
        self.top_mask_rows
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.width + x;
        self.valid[i].then_some(self.values[i])
    }

    pub fn is_valid_index(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn value_at_index(&self, i: usize) -> Option<f64> {
        self.valid[i].then_some(self.values[i])
    }

    /// Sets a pixel; writes into masked rows or non-positive values are ignored.
    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        if y < self.top_mask_rows || !(depth > 0.0 && depth.is_finite()) {
            return;
        }
        let i = y * self.width + x;
        self.values[i] = depth;
        self.valid[i] = true;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        self.values[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Raw values with invalid pixels as 0 (wire/disk representation).
    pub fn values_or_zero(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }
}

/// Z-buffered projection of points: each pixel keeps the nearest depth.
pub fn render_depth<'a>(
    points: impl IntoIterator<Item = &'a Vector3<f64>>,
    view: &CameraView,
    top_mask_rows: usize,
) -> DepthMap {
    let (w, h) = (view.width(), view.height());
    let mut map = DepthMap::empty(w, h, top_mask_rows);
    for p in points {
        let Ok((px, depth)) = project(view, p) else { continue };
        let (x, y) = (px.x.floor(), px.y.floor());
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        match map.get(x, y) {
            Some(d) if d <= depth => {}
            _ => map.set(x, y, depth),
        }
    }
    map
}

const COMPLETION_NEIGHBORS: usize = 8;

/// Fills every unmasked invalid pixel with the inverse-distance-weighted mean
/// of its 8 nearest valid pixels (ties broken by row-major index). Valid
/// inputs are kept as-is.
pub fn complete_depth(sparse: &DepthMap) -> Result<DepthMap, LidarError> {
    let total_valid = sparse.valid_count();
    if total_valid == 0 {
        return Err(LidarError::NoValidPixels);
    }
    let (w, h) = (sparse.width, sparse.height);
    let top = sparse.top_mask_rows;
    let k = COMPLETION_NEIGHBORS.min(total_valid);
    let max_ring = w.max(h);

    let rows: Vec<Vec<(usize, f64)>> = (top..h)
        .into_par_iter()
        .map(|y| {
            let mut fills = Vec::new();
            let mut cand: Vec<(i64, usize, f64)> = Vec::new();
            for x in 0..w {
                if sparse.valid[y * w + x] {
                    continue;
                }
                cand.clear();
                for r in 1..=max_ring as i64 {
                    ring_visit(x as i64, y as i64, r, w, h, |qx, qy| {
                        let i = qy * w + qx;
                        if sparse.valid[i] {
                            let dx = qx as i64 - x as i64;
                            let dy = qy as i64 - y as i64;
                            cand.push((dx * dx + dy * dy, i, sparse.values[i]));
                        }
                    });
                    if cand.len() >= k {
                        cand.sort_unstable_by_key(|c| (c.0, c.1));
                        if cand[k - 1].0 <= r * r || cand.len() == total_valid {
                            break;
                        }
                    }
                }
                cand.sort_unstable_by_key(|c| (c.0, c.1));
                let (mut num, mut den) = (0.0, 0.0);
                for &(d2, _, v) in cand.iter().take(k) {
                    let wgt = 1.0 / (d2 as f64).sqrt();
                    num += wgt * v;
                    den += wgt;
                }
                fills.push((x, num / den));
            }
            fills
        })
        .collect();

    let mut out = sparse.clone();
    for (row, fills) in rows.into_iter().enumerate() {
        let y = top + row;
        for (x, v) in fills {
            out.set(x, y, v);
        }
    }
    Ok(out)
}

// Visits in-bounds pixels at Chebyshev distance exactly `r` from (cx, cy).
fn ring_visit(cx: i64, cy: i64, r: i64, w: usize, h: usize, mut f: impl FnMut(usize, usize)) {
    let (w, h) = (w as i64, h as i64);
    let mut visit = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            f(x as usize, y as usize);
        }
    };
    for x in (cx - r)..=(cx + r) {
        visit(x, cy - r);
        visit(x, cy + r);
    }
    for y in (cy - r + 1)..=(cy + r - 1) {
        visit(cx - r, y);
        visit(cx + r, y);
    }
}

const CLOUD_MAGIC: &[u8; 4] = b"SGDP";
const CLOUD_VERSION: u32 = 1;

/// Binary colored-point-cloud container: magic, version, u64 count, then
/// positions and colors as little-endian f32 arrays.
pub fn save_point_cloud(cloud: &ColoredPointCloud, path: &Path) -> Result<(), LidarError> {
    let mut w = BufWriter::new(File::create(path).map_err(FormatError::Io)?);
    let io = |e| LidarError::Format(FormatError::Io(e));
    binfmt::write_header(&mut w, CLOUD_MAGIC, CLOUD_VERSION).map_err(io)?;
    binfmt::write_u64(&mut w, cloud.len() as u64).map_err(io)?;
    binfmt::write_f32s(&mut w, cloud.points.iter().flat_map(|p| p.position.iter().map(|&v| v as f32)).collect::<Vec<_>>())
        .map_err(io)?;
    binfmt::write_f32s(&mut w, cloud.points.iter().flat_map(|p| p.color.map(|v| v as f32)).collect::<Vec<_>>())
        .map_err(io)?;
    Ok(())
}

pub fn load_point_cloud(path: &Path) -> Result<ColoredPointCloud, LidarError> {
    let mut r = BufReader::new(File::open(path).map_err(FormatError::Io)?);
    binfmt::read_header(&mut r, CLOUD_MAGIC, CLOUD_VERSION)?;
    let n = binfmt::read_u64(&mut r)? as usize;
    let pos = binfmt::read_f32s(&mut r, n.saturating_mul(3))?;
    let col = binfmt::read_f32s(&mut r, n.saturating_mul(3))?;
    binfmt::expect_eof(&mut r)?;
    let points = pos
        .chunks_exact(3)
        .zip(col.chunks_exact(3))
        .map(|(p, c)| ColoredPoint {
            position: Vector3::new(f64::from(p[0]), f64::from(p[1]), f64::from(p[2])),
            color: [f64::from(c[0]), f64::from(c[1]), f64::from(c[2])],
        })
        .collect();
    Ok(ColoredPointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(w: usize, h: usize) -> CameraView {
        CameraView::new(Intrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(), Pose::identity())
            .unwrap()
    }

    fn cp(x: f64, y: f64, z: f64, color: [f64; 3]) -> ColoredPoint {
        ColoredPoint { position: Vector3::new(x, y, z), color }
    }

    #[test]
    fn colorize_constant_image_and_drop_behind() {
        let img = Image::filled(100, 100, [1.0, 0.0, 0.0]);
        let sweep = PointSweep::new(vec![Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, -5.0)], 0).unwrap();
        let c = colorize_sweep(&sweep, &view(100, 100), &img).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.points[0].color, [1.0, 0.0, 0.0]);
        assert_eq!(c.points[0].position, Vector3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn colorize_checkerboard_matches_direct_lookup() {
        let (w, h) = (40, 30);
        let v = view(w, h);
        let img = Image::from_fn(w, h, |x, y| if (x + y) % 2 == 0 { [1.0, 1.0, 1.0] } else { [0.0, 0.2, 0.0] });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        let mut expect = Vec::new();
        for _ in 0..100 {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            let depth = rng.random_range(1.0..20.0);
            // Aim at the pixel center.
            let p = crate::geometry::unproject(&v, &nalgebra::Vector2::new(x as f64 + 0.5, y as f64 + 0.5), depth).unwrap();
            pts.push(p);
            expect.push(img.get(x, y));
        }
        let c = colorize_sweep(&PointSweep::new(pts, 0).unwrap(), &v, &img).unwrap();
        assert_eq!(c.len(), 100);
        for (p, e) in c.points.iter().zip(expect) {
            assert_eq!(p.color, e);
        }
    }

    #[test]
    fn colorize_reports_empty_result() {
        let img = Image::filled(10, 10, [0.5; 3]);
        let sweep = PointSweep::new(vec![Vector3::new(0.0, 0.0, -1.0)], 0).unwrap();
        assert!(matches!(colorize_sweep(&sweep, &view(10, 10), &img), Err(LidarError::EmptyResult)));
    }

    #[test]
    fn sweep_rejects_nan() {
        assert!(matches!(
            PointSweep::new(vec![Vector3::new(f64::NAN, 0.0, 0.0)], 0),
            Err(LidarError::NonFinitePoint(0))
        ));
    }

    #[test]
    fn downsample_centroid_and_collapse() {
        let cloud = ColoredPointCloud {
            points: vec![cp(0.1, 0.0, 0.0, [1.0, 0.0, 0.0]), cp(0.3, 0.0, 0.0, [0.0, 0.0, 1.0])],
        };
        let out = accumulate_and_downsample(&[cloud.clone()], 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points[0].position - Vector3::new(0.2, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(out.points[0].color, [0.5, 0.0, 0.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let many = ColoredPointCloud {
            points: (0..500)
                .map(|_| cp(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), [0.1; 3]))
                .collect(),
        };
        assert_eq!(accumulate_and_downsample(&[many], 10.0).unwrap().len(), 1);
        assert!(accumulate_and_downsample(&[], 0.5).unwrap().is_empty());
        assert!(matches!(accumulate_and_downsample(&[], 0.0), Err(LidarError::InvalidVoxelSize(_))));
    }

    #[test]
    fn depth_zbuffer_keeps_nearest_and_masks_top_rows() {
        let v = view(100, 100);
        let pts = [Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, 0.0, 5.0)];
        let d = render_depth(pts.iter(), &v, 0);
        assert_eq!(d.get(50, 50), Some(3.0));
        assert_eq!(d.valid_count(), 1);

        // A point that would land in row 10 is suppressed by an 80-row mask.
        let high = [Vector3::new(0.0, -0.4, 1.0)];
        let d = render_depth(high.iter(), &v, 80);
        assert_eq!(d.valid_count(), 0);
        for y in 0..80 {
            for x in 0..100 {
                assert_eq!(d.get(x, y), None);
            }
        }
    }

    #[test]
    fn completion_cases() {
        let mut full = DepthMap::empty(6, 5, 1);
        for y in 1..5 {
            for x in 0..6 {
                full.set(x, y, 1.0 + (x * y) as f64);
            }
        }
        assert_eq!(complete_depth(&full).unwrap(), full);

        let mut one = DepthMap::empty(6, 5, 2);
        one.set(3, 3, 7.0);
        let c = complete_depth(&one).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                match c.get(x, y) {
                    Some(v) => assert!(y >= 2 && (v - 7.0).abs() < 1e-12, "{x},{y}: {v}"),
                    None => assert!(y < 2),
                }
            }
        }

        assert!(matches!(complete_depth(&DepthMap::empty(4, 4, 0)), Err(LidarError::NoValidPixels)));
    }

    #[test]
    fn completion_range_property_random_placements() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (w, h) = (rng.random_range(3..20), rng.random_range(3..20));
            let mut m = DepthMap::empty(w, h, rng.random_range(0..2));
            let top = m.top_mask_rows();
            let a = (rng.random_range(0..w), rng.random_range(top..h));
            let mut b = (rng.random_range(0..w), rng.random_range(top..h));
            while b == a {
                b = (rng.random_range(0..w), rng.random_range(top..h));
            }
            m.set(a.0, a.1, 2.0);
            m.set(b.0, b.1, 10.0);
            let c = complete_depth(&m).unwrap();
            assert_eq!(c.get(a.0, a.1), Some(2.0));
            assert_eq!(c.get(b.0, b.1), Some(10.0));
            for y in top..h {
                for x in 0..w {
                    let v = c.get(x, y).unwrap();
                    assert!((2.0..=10.0).contains(&v));
                }
            }
            assert_eq!(complete_depth(&c).unwrap(), c);
        }
    }

    #[test]
    fn point_cloud_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pc.bin");
        let cloud = ColoredPointCloud { points: vec![cp(1.5, -2.0, 0.25, [0.5, 0.25, 1.0])] };
        save_point_cloud(&cloud, &path).unwrap();
        assert_eq!(load_point_cloud(&path).unwrap(), cloud);
    }
}
