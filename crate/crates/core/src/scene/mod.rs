//! Scene data types shared by every stage of the pipeline.

mod pose;
pub mod trajectory;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};

use crate::image::Image;

pub use pose::{pose_delta_metrics, quat_from_xyzw, Sim3Pose};

pub type KeyframeId = u32;

/// Pinhole intrinsics. Pixel `(x, y)` has its center at coordinate `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    /// Centered principal point with the given horizontal field of view.
    pub fn with_fov(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self::new(fx, fx, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Camera-frame ray through a pixel with unit z component.
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at the given z-depth.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        self.ray(x, y) * depth
    }

    /// Nearest pixel index for a projected point, if it lands inside the image.
    pub fn pixel_of(&self, uv: &Vector2<f64>) -> Option<(usize, usize)> {
        let x = uv.x.round();
        let y = uv.y.round();
        (x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height)
            .then(|| (x as usize, y as usize))
    }
}

/// One anisotropic splat. Scales are stored as logarithms and opacity as a
/// logit so unconstrained gradient steps keep both in range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: Vector3<f64>,
    /// Kept unit-norm by the optimizer; consumers normalize anyway.
    pub rot: Quaternion<f64>,
    pub log_scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity_logit: f64,
    pub anchor: KeyframeId,
}

impl GaussianPrimitive {
    pub fn isotropic(mu: Vector3<f64>, scale: f64, color: Vector3<f64>, opacity: f64, anchor: KeyframeId) -> Self {
        Self {
            mu,
            rot: Quaternion::identity(),
            log_scale: Vector3::repeat(scale.ln()),
            color,
            opacity_logit: logit(opacity),
            anchor,
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(self.rot)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.unit_rotation().to_rotation_matrix().into_inner()
    }

    /// World-frame covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let l = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale());
        l * l.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.is_finite())
            && self.rot.coords.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite() && v.exp().is_finite())
            && self.color.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-image inputs. All per-pixel buffers are row-major and share the
/// image's width and height.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// `true` marks water.
    pub water_mask: Vec<bool>,
    /// Camera-frame 3D point per pixel.
    pub pointmap: Vec<Vector3<f64>>,
    pub confidence: Vec<f64>,
    pub timestamp: f64,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn pixel_count(&self) -> usize {
        self.image.len()
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.pixel_count();
        self.water_mask.len() == n && self.pointmap.len() == n && self.confidence.len() == n
    }

    pub fn water_fraction(&self) -> f64 {
        let n = self.water_mask.iter().filter(|&&m| m).count();
        n as f64 / self.water_mask.len().max(1) as f64
    }

    /// Median z of the pointmap over pixels with positive confidence.
    pub fn median_depth(&self) -> Option<f64> {
        let mut z: Vec<f64> = self
            .pointmap
            .iter()
            .zip(&self.confidence)
            .filter(|(p, &q)| q > 0.0 && p.z.is_finite() && p.z > 0.0)
            .map(|(p, _)| p.z)
            .collect();
        if z.is_empty() {
            return None;
        }
        z.sort_by(f64::total_cmp);
        Some(z[z.len() / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub frame: Frame,
    /// World-from-camera.
    pub pose: Sim3Pose,
    pub rerender_flag: bool,
}

impl Keyframe {
    pub fn new(id: KeyframeId, frame: Frame, pose: Sim3Pose) -> Self {
        Self {
            id,
            frame,
            pose,
            rerender_flag: false,
        }
    }
}

/// A pixel correspondence between two frames, weighted by
/// `q = sqrt(Q_a · Q_b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub pixel_a: (u32, u32),
    pub pixel_b: (u32, u32),
    pub q: f64,
}

impl Match {
    pub fn new(pixel_a: (u32, u32), pixel_b: (u32, u32), conf_a: f64, conf_b: f64) -> Self {
        Self {
            pixel_a,
            pixel_b,
            q: (conf_a.max(0.0) * conf_b.max(0.0)).sqrt(),
        }
    }

    #[inline]
    pub fn index_a(&self, width: usize) -> usize {
        self.pixel_a.1 as usize * width + self.pixel_a.0 as usize
    }

    #[inline]
    pub fn index_b(&self, width: usize) -> usize {
        self.pixel_b.1 as usize * width + self.pixel_b.0 as usize
    }
}
