use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Splat2D, ALPHA_MIN, COV_REGULARIZATION, NEAR_PLANE};
use crate::scene::{CameraIntrinsics, GaussianPrimitive, Sim3Pose};

/// Everything the forward and backward passes need about one projected
/// primitive.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Projection {
    pub splat: Splat2D,
    /// `Σ̂⁻¹`.
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Camera-frame center.
    pub p_cam: Vector3<f64>,
    /// Camera-from-world rotation.
    pub w: Matrix3<f64>,
    /// `J·W`.
    pub m: Matrix2x3<f64>,
    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` outside of which α is
    /// below [`ALPHA_MIN`].
    pub bbox: (usize, usize, usize, usize),
}

/// Projects one primitive through the rigid part of a world-from-camera pose.
/// Returns `None` if the primitive is culled.
pub fn project_gaussian(g: &GaussianPrimitive, pose: &Sim3Pose, k: &CameraIntrinsics) -> Option<Splat2D> {
    let w = pose.rotation_matrix().transpose();
    let p_cam = w * (g.mu - pose.translation);
    project_cam(g, &p_cam, &w, k).map(|(splat, _)| splat)
}

fn project_cam(
    g: &GaussianPrimitive,
    p_cam: &Vector3<f64>,
    w: &Matrix3<f64>,
    k: &CameraIntrinsics,
) -> Option<(Splat2D, Matrix2x3<f64>)> {
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    if !(z > NEAR_PLANE) {
        return None;
    }
    let center = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);
    let j = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    let m = j * w;
    let cov = m * g.covariance() * m.transpose() + Matrix2::identity() * COV_REGULARIZATION;
    let cov = 0.5 * (cov + cov.transpose());
    let (sx, sy) = (3.0 * cov.m11.sqrt(), 3.0 * cov.m22.sqrt());
    let inside = center.x >= -0.5 - sx
        && center.x <= k.width as f64 - 0.5 + sx
        && center.y >= -0.5 - sy
        && center.y <= k.height as f64 - 0.5 + sy;
    if !inside || !center.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some((
        Splat2D {
            center2d: center,
            cov2d: cov,
            depth: z,
            primitive_index: 0,
        },
        m,
    ))
}

/// Full projection record, or `None` when culled or too faint to reach
/// [`ALPHA_MIN`] anywhere.
pub(crate) fn project_full(
    g: &GaussianPrimitive,
    index: usize,
    w: &Matrix3<f64>,
    t: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Option<Projection> {
    let p_cam = w * (g.mu - t);
    let (mut splat, m) = project_cam(g, &p_cam, w, k)?;
    splat.primitive_index = index;
    let opacity = g.opacity();
    let conic = splat.cov2d.try_inverse()?;
    // α ≥ 1/255 requires dᵀΣ̂⁻¹d ≤ 2 ln(255 Λ); |d|² ≤ λ_max times that.
    let reach = 2.0 * (opacity / ALPHA_MIN).ln();
    if !(reach > 0.0) {
        return None;
    }
    let c = splat.cov2d;
    let half_tr = 0.5 * (c.m11 + c.m22);
    let det = c.m11 * c.m22 - c.m12 * c.m21;
    let lambda_max = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
    let r = (lambda_max * reach).sqrt();
    let (cx, cy) = (splat.center2d.x, splat.center2d.y);
    let x0 = (cx - r).ceil().max(0.0);
    let y0 = (cy - r).ceil().max(0.0);
    let x1 = (cx + r).floor().min(k.width as f64 - 1.0);
    let y1 = (cy + r).floor().min(k.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(Projection {
        splat,
        conic,
        opacity,
        color: g.color,
        p_cam,
        w: *w,
        m,
        bbox: (x0 as usize, y0 as usize, x1 as usize, y1 as usize),
    })
}
