//! Optimizer and density-statistics sidecar written next to a checkpoint, so
//! that a resumed run continues bit-identically.
//!
//! Layout: "SGDS", u32 version, u64 iter, u64 adam step, u64 n, u64 sh
//! stride, then m and v of each group (means, log-scales, rotations,
//! opacity, SH) as f64, then the accumulated gradient norms (f64) and their
//! counts (u32).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::optim::{AdamState, Moments};
use crate::binfmt;
use crate::gaussians::GradStats;
use crate::scene_io::SceneError;

const STATE_MAGIC: &[u8; 4] = b"SGDS";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub iter: u64,
    pub adam: AdamState,
    pub stats: GradStats,
}

pub fn save_state(snapshot: &OptimizerSnapshot, path: &Path) -> Result<(), SceneError> {
    let n = snapshot.adam.len();
    let stride = if n == 0 { 0 } else { snapshot.adam.sh.m.len() / n };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        binfmt::write_header(&mut w, STATE_MAGIC, STATE_VERSION)?;
        binfmt::write_u64(&mut w, snapshot.iter)?;
        binfmt::write_u64(&mut w, snapshot.adam.step)?;
        binfmt::write_u64(&mut w, n as u64)?;
        binfmt::write_u64(&mut w, stride as u64)?;
        for g in groups(&snapshot.adam) {
            binfmt::write_f64s(&mut w, &g.m)?;
            binfmt::write_f64s(&mut w, &g.v)?;
        }
        binfmt::write_f64s(&mut w, &snapshot.stats.accum)?;
        for c in &snapshot.stats.count {
            binfmt::write_u32(&mut w, *c)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<OptimizerSnapshot, SceneError> {
    let mut r = BufReader::new(File::open(path)?);
    binfmt::read_header(&mut r, STATE_MAGIC, STATE_VERSION)?;
    let iter = binfmt::read_u64(&mut r)?;
    let step = binfmt::read_u64(&mut r)?;
    let n = binfmt::read_u64(&mut r)? as usize;
    let stride = binfmt::read_u64(&mut r)? as usize;
    let mut adam = AdamState::new(0, stride);
    adam.step = step;
    for (g, width) in [(&mut adam.means, 3), (&mut adam.log_scales, 3), (&mut adam.rotations, 4), (&mut adam.opacity, 1), (&mut adam.sh, stride)] {
        let len = n.saturating_mul(width);
        *g = Moments { m: binfmt::read_f64s(&mut r, len)?, v: binfmt::read_f64s(&mut r, len)? };
    }
    let accum = binfmt::read_f64s(&mut r, n)?;
    let count = (0..n).map(|_| binfmt::read_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
    binfmt::expect_eof(&mut r)?;
    Ok(OptimizerSnapshot { iter, adam, stats: GradStats { accum, count } })
}

fn groups(a: &AdamState) -> [&Moments; 5] {
    [&a.means, &a.log_scales, &a.rotations, &a.opacity, &a.sh]
}
