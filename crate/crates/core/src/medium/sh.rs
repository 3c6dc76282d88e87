//! Real spherical harmonics up to degree 3 (16 coefficients), ordered by
//! degree then `m = -l..=l`. No Condon-Shortley phase.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{SMatrix, Vector3};

pub const SH_DIM: usize = 16;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2_XY: f64 = 1.092_548_430_592_079_2;
const C2_ZZ: f64 = 0.315_391_565_252_520_05;
const C2_XX_YY: f64 = 0.546_274_215_296_039_6;
const C3_A: f64 = 0.590_043_589_926_643_5;
const C3_B: f64 = 2.890_611_442_640_554;
const C3_C: f64 = 0.457_045_799_464_465_8;
const C3_D: f64 = 0.373_176_332_590_115_4;
const C3_E: f64 = 1.445_305_721_320_277;

static NON_UNIT_INPUTS: AtomicU64 = AtomicU64::new(0);

/// Number of [`sh_encode`] calls that had to renormalize their input.
pub fn non_unit_input_count() -> u64 {
    NON_UNIT_INPUTS.load(Ordering::Relaxed)
}

fn normalized(dir: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let n = dir.norm();
    if (n - 1.0).abs() > 1e-6 {
        NON_UNIT_INPUTS.fetch_add(1, Ordering::Relaxed);
    }
    (dir / n, n)
}

fn basis(d: &Vector3<f64>) -> [f64; SH_DIM] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_XY * x * y,
        C2_XY * y * z,
        C2_ZZ * (3.0 * zz - 1.0),
        C2_XY * x * z,
        C2_XX_YY * (xx - yy),
        C3_A * y * (3.0 * xx - yy),
        C3_B * x * y * z,
        C3_C * y * (5.0 * zz - 1.0),
        C3_D * z * (5.0 * zz - 3.0),
        C3_C * x * (5.0 * zz - 1.0),
        C3_E * z * (xx - yy),
        C3_A * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of [`basis`] with respect to `(x, y, z)`, treating the
/// polynomials as functions on all of R³.
fn basis_jacobian(d: &Vector3<f64>) -> SMatrix<f64, SH_DIM, 3> {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    #[rustfmt::skip]
    let rows: [[f64; 3]; SH_DIM] = [
        [0.0, 0.0, 0.0],
        [0.0, C1, 0.0],
        [0.0, 0.0, C1],
        [C1, 0.0, 0.0],
        [C2_XY * y, C2_XY * x, 0.0],
        [0.0, C2_XY * z, C2_XY * y],
        [0.0, 0.0, C2_ZZ * 6.0 * z],
        [C2_XY * z, 0.0, C2_XY * x],
        [C2_XX_YY * 2.0 * x, -C2_XX_YY * 2.0 * y, 0.0],
        [C3_A * 6.0 * x * y, C3_A * (3.0 * xx - 3.0 * yy), 0.0],
        [C3_B * y * z, C3_B * x * z, C3_B * x * y],
        [0.0, C3_C * (5.0 * zz - 1.0), C3_C * 10.0 * y * z],
        [0.0, 0.0, C3_D * (15.0 * zz - 3.0)],
        [C3_C * (5.0 * zz - 1.0), 0.0, C3_C * 10.0 * x * z],
        [C3_E * 2.0 * x * z, -C3_E * 2.0 * y * z, C3_E * (xx - yy)],
        [C3_A * (3.0 * xx - 3.0 * yy), -C3_A * 6.0 * x * y, 0.0],
    ];
    SMatrix::from_fn(|r, c| rows[r][c])
}

/// Encodes a direction. Inputs that are not unit length (beyond 1e-6) are
/// normalized first and counted in [`non_unit_input_count`].
pub fn sh_encode(dir: &Vector3<f64>) -> [f64; SH_DIM] {
    let (d, _) = normalized(dir);
    basis(&d)
}

/// Vector-Jacobian product of [`sh_encode`] (including the normalization)
/// with `grad` on the 16 outputs.
pub fn sh_encode_vjp(dir: &Vector3<f64>, grad: &[f64; SH_DIM]) -> Vector3<f64> {
    let (d, n) = normalized(dir);
    let g = SMatrix::<f64, SH_DIM, 1>::from_column_slice(grad);
    let gd: Vector3<f64> = basis_jacobian(&d).transpose() * g;
    // d(dir/|dir|)/d(dir) = (I - d dᵀ) / |dir|
    (gd - d * d.dot(&gd)) / n
}
