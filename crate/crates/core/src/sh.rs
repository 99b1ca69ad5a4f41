//! Real spherical-harmonics basis (degree <= 3) in the ordering and sign
//! convention used by Gaussian-splatting renderers.

use nalgebra::Vector3;

pub const MAX_DEGREE: usize = 3;
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for a given degree.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Basis values at a unit direction. Entries past `coeff_count(degree)` are zero.
pub fn basis(degree: usize, d: &Vector3<f64>) -> [f64; 16] {
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree == 0 {
        return b;
    }
    let (x, y, z) = (d.x, d.y, d.z);
    b[1] = -SH_C1 * y;
    b[2] = SH_C1 * z;
    b[3] = -SH_C1 * x;
    if degree == 1 {
        return b;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    b[4] = SH_C2[0] * xy;
    b[5] = SH_C2[1] * yz;
    b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    b[7] = SH_C2[3] * xz;
    b[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return b;
    }
    b[9] = SH_C3[0] * y * (3.0 * xx - yy);
    b[10] = SH_C3[1] * xy * z;
    b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    b[14] = SH_C3[5] * z * (xx - yy);
    b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    b
}

/// Partial derivatives of each basis polynomial with respect to the
/// (unnormalized) direction components, as `[d/dx, d/dy, d/dz]` per entry.
pub fn basis_gradient(degree: usize, d: &Vector3<f64>) -> [[f64; 3]; 16] {
    let mut g = [[0.0; 3]; 16];
    if degree == 0 {
        return g;
    }
    let (x, y, z) = (d.x, d.y, d.z);
    g[1] = [0.0, -SH_C1, 0.0];
    g[2] = [0.0, 0.0, SH_C1];
    g[3] = [-SH_C1, 0.0, 0.0];
    if degree == 1 {
        return g;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
    g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
    g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
    g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    if degree == 2 {
        return g;
    }
    g[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
    g[11] = [
        SH_C3[2] * (-2.0 * x * y),
        SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
        SH_C3[2] * 8.0 * y * z,
    ];
    g[12] = [
        SH_C3[3] * (-6.0 * x * z),
        SH_C3[3] * (-6.0 * y * z),
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    g[13] = [
        SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
        SH_C3[4] * (-2.0 * x * y),
        SH_C3[4] * 8.0 * x * z,
    ];
    g[14] = [SH_C3[5] * 2.0 * x * z, -SH_C3[5] * 2.0 * y * z, SH_C3[5] * (xx - yy)];
    g[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), SH_C3[6] * (-6.0 * x * y), 0.0];
    g
}

/// Unclamped color `sum_k basis_k * coeff_k + 0.5`. `coeffs` is laid out
/// `[k * 3 + channel]` and must hold at least `coeff_count(degree)` entries.
pub fn eval_raw(coeffs: &[f32], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    let b = basis(degree, dir);
    let mut rgb = [0.5; 3];
    for (k, bk) in b.iter().enumerate().take(coeff_count(degree)) {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += bk * f64::from(coeffs[k * 3 + c]);
        }
    }
    rgb
}

/// View-dependent RGB at a unit direction, clamped to `[0, 1]`.
pub fn eval_sh(coeffs: &[f32], degree: usize, dir: &Vector3<f64>) -> [f64; 3] {
    eval_raw(coeffs, degree, dir).map(|v| v.clamp(0.0, 1.0))
}

/// DC coefficient that evaluates to `color` at every direction.
pub fn rgb_to_dc(color: f64) -> f64 {
    (color - 0.5) / SH_C0
}
