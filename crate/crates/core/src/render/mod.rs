//! CPU splatting renderer with an attenuation/backscatter medium.
//!
//! Per pixel, primitives are blended front to back in global depth order.
//! With `w_i = T_i α_i` and per-ray medium attributes from the medium network:
//!
//! ```text
//! object    = Σ w_i · exp(-σ_attn t_i) · c_i
//! medium    = c_med · (Σ T_i [exp(-σ_bs t_{i-1}) - exp(-σ_bs t_i)] + T_{N+1} exp(-σ_bs t_N))
//!           = c_med · (1 - Σ w_i exp(-σ_bs t_i))
//! clear     = Σ w_i · c_i
//! composite = object + medium
//! ```
//!
//! The tail term extends the last medium segment to infinity, so a ray that
//! hits nothing renders exactly `c_med`. `t_i` is the camera-frame z of the
//! primitive center.

mod backward;
mod forward;
mod project;

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};

use crate::image::Image;

pub use backward::{render_backward, render_backward_taped, ImageGrads, RenderGradients};
pub use forward::{render, render_taped, RenderTape};
pub use project::project_gaussian;

/// Added to every projected covariance, in pixels².
pub const COV_REGULARIZATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Front-to-back traversal stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const NEAR_PLANE: f64 = 0.01;
/// Blending weight a primitive must exceed somewhere to count as visible.
pub const VISIBLE_WEIGHT: f64 = 1e-4;

/// A primitive projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub center2d: Vector2<f64>,
    /// Regularized 2D covariance, pixels².
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the primitive center.
    pub depth: f64,
    pub primitive_index: usize,
}

/// `α = Λ·exp(-½ dᵀ Σ̂⁻¹ d)` with `d = pixel - center`, clamped to
/// [`ALPHA_MAX`].
pub fn evaluate_alpha(splat: &Splat2D, opacity: f64, pixel: &Vector2<f64>) -> f64 {
    let d = pixel - splat.center2d;
    let conic = splat.cov2d.try_inverse().expect("projected covariance must be SPD");
    let q = d.dot(&(conic * d));
    (opacity * (-0.5 * q).exp()).min(ALPHA_MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub composite: Image,
    pub object: Image,
    pub medium: Image,
    pub clear: Image,
    /// `Σ T_i α_i` per pixel.
    pub accum_opacity: Vec<f64>,
    pub final_transmittance: Vec<f64>,
    /// Weight-normalized depth `Σ w_i t_i / Σ w_i`; zero where nothing blends.
    pub depth: Vec<f64>,
    /// Indices of primitives whose blending weight exceeds [`VISIBLE_WEIGHT`]
    /// at some pixel, ascending.
    pub visible: Vec<usize>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.composite.width
    }

    pub fn height(&self) -> usize {
        self.composite.height
    }

    pub fn mode(&self, mode: RenderMode) -> &Image {
        match mode {
            RenderMode::Composite => &self.composite,
            RenderMode::Object => &self.object,
            RenderMode::Medium => &self.medium,
            RenderMode::Clear => &self.clear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Composite,
    Object,
    Medium,
    Clear,
}

impl RenderMode {
    pub const ALL: [RenderMode; 4] = [
        RenderMode::Composite,
        RenderMode::Object,
        RenderMode::Medium,
        RenderMode::Clear,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RenderMode::Composite => "composite",
            RenderMode::Object => "object",
            RenderMode::Medium => "medium",
            RenderMode::Clear => "clear",
        }
    }
}

impl std::str::FromStr for RenderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RenderMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown render mode '{s}' (expected composite|object|medium|clear)"))
    }
}

/// Gradient with respect to every attribute of one primitive. `rot` is laid
/// out like `Quaternion::coords`, i.e. `(x, y, z, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveGrad {
    pub mu: Vector3<f64>,
    pub rot: Vector4<f64>,
    pub log_scale: Vector3<f64>,
    pub color: Vector3<f64>,
    pub opacity_logit: f64,
}

impl Default for PrimitiveGrad {
    fn default() -> Self {
        Self {
            mu: Vector3::zeros(),
            rot: Vector4::zeros(),
            log_scale: Vector3::zeros(),
            color: Vector3::zeros(),
            opacity_logit: 0.0,
        }
    }
}

impl PrimitiveGrad {
    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|v| *v == 0.0)
    }

    pub fn to_array(&self) -> [f64; 14] {
        let mut a = [0.0; 14];
        a[0..3].copy_from_slice(self.mu.as_slice());
        a[3..7].copy_from_slice(self.rot.as_slice());
        a[7..10].copy_from_slice(self.log_scale.as_slice());
        a[10..13].copy_from_slice(self.color.as_slice());
        a[13] = self.opacity_logit;
        a
    }

    pub fn add_assign(&mut self, o: &PrimitiveGrad) {
        self.mu += o.mu;
        self.rot += o.rot;
        self.log_scale += o.log_scale;
        self.color += o.color;
        self.opacity_logit += o.opacity_logit;
    }
}
