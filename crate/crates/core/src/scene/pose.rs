use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};

/// A similarity transform `x -> s·R·x + t`.
///
/// Keyframe and camera poses are world-from-camera. Rendering only ever uses
/// the rigid part (see [`Sim3Pose::to_se3`]); the scale matters for tracking,
/// bundle adjustment and primitive adjustment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Pose {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Sim3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Pose {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(scale > 0.0, "Sim3 scale must be positive, got {scale}");
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn from_rigid(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self::new(1.0, rotation, translation)
    }

    /// Same rotation and translation with unit scale.
    pub fn to_se3(&self) -> Self {
        Self {
            scale: 1.0,
            ..*self
        }
    }

    pub fn compose(&self, other: &Sim3Pose) -> Sim3Pose {
        Sim3Pose {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3Pose {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        Sim3Pose {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -(inv_scale * (inv_rot * self.translation)),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Applies the inverse transform without forming it.
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation)) / self.scale
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous `[sR t; 0 1]`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.scale * self.rotation_matrix()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle in radians, `2·acos(|w|)`.
    pub fn rotation_angle(&self) -> f64 {
        quaternion_angle(&self.rotation)
    }

    /// Left-multiplies by a small tangent increment `(omega, v, sigma)`:
    /// `T <- (e^sigma, Exp(omega), v) ∘ T`.
    pub fn retract_left(&self, omega: &Vector3<f64>, v: &Vector3<f64>, sigma: f64) -> Sim3Pose {
        let delta = Sim3Pose {
            scale: sigma.exp(),
            rotation: UnitQuaternion::from_scaled_axis(*omega),
            translation: *v,
        };
        let mut out = delta.compose(self);
        out.rotation = UnitQuaternion::new_normalize(out.rotation.into_inner());
        out
    }

    pub fn is_valid(&self) -> bool {
        self.scale > 0.0
            && self.scale.is_finite()
            && self.translation.iter().all(|v| v.is_finite())
            && (self.rotation.into_inner().norm() - 1.0).abs() < 1e-9
    }
}

fn quaternion_angle(q: &UnitQuaternion<f64>) -> f64 {
    let w = q.into_inner().w.abs().min(1.0);
    2.0 * w.acos()
}

/// Translation distance and rotation angle (degrees, in [0, 180]) of the
/// rigid delta `old⁻¹·new`. Scales are ignored.
pub fn pose_delta_metrics(old: &Sim3Pose, new: &Sim3Pose) -> (f64, f64) {
    let delta = old.to_se3().inverse().compose(&new.to_se3());
    let d = delta.translation.norm();
    let theta = quaternion_angle(&delta.rotation).to_degrees();
    (d, theta.clamp(0.0, 180.0))
}

/// Builds a unit quaternion from raw `(x, y, z, w)` components.
pub fn quat_from_xyzw(x: f64, y: f64, z: f64, w: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
}
