use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::forward::{blend, render_taped, RenderTape, ROWS_PER_TASK};
use super::project::Projection;
use super::{PrimitiveGrad, ALPHA_MAX};
use crate::error::RenderError;
use crate::image::Image;
use crate::medium::{backward_batch, MediumNetParams, MediumSample};
use crate::scene::{CameraIntrinsics, GaussianPrimitive, Sim3Pose};

/// Loss gradients with respect to the rendered images. Missing images count
/// as zero.
#[derive(Debug, Clone, Default)]
pub struct ImageGrads {
    pub composite: Option<Image>,
    pub object: Option<Image>,
    pub medium: Option<Image>,
    pub clear: Option<Image>,
}

impl ImageGrads {
    pub fn composite(g: Image) -> Self {
        Self {
            composite: Some(g),
            ..Self::default()
        }
    }

    fn at(img: &Option<Image>, idx: usize) -> Vector3<f64> {
        img.as_ref().map_or(Vector3::zeros(), |i| Vector3::from(i.pixels[idx]))
    }
}

#[derive(Debug, Clone)]
pub struct RenderGradients {
    /// One entry per map primitive; culled primitives get zeros.
    pub primitives: Vec<PrimitiveGrad>,
    pub medium: MediumNetParams,
}

/// Image-space gradient accumulated for one projection.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean: Vector2<f64>,
    /// ∂L/∂(conic entries) as `(c00, c01, c11)`, with c01 counted once.
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

struct Contributor {
    index: usize,
    alpha: f64,
    transmittance: f64,
}

struct BlockGrads {
    splats: Vec<SplatGrad>,
    medium: Vec<MediumSample>,
}

fn backward_rows(tape: &RenderTape, grads: &ImageGrads, y0: usize, y1: usize) -> BlockGrads {
    let mut splats = vec![SplatGrad::default(); tape.projections.len()];
    let mut medium = Vec::with_capacity((y1 - y0) * tape.width);
    let mut contrib: Vec<Contributor> = Vec::new();
    for y in y0..y1 {
        for x in 0..tape.width {
            let idx = y * tape.width + x;
            let gc = ImageGrads::at(&grads.composite, idx);
            let g_obj = gc + ImageGrads::at(&grads.object, idx);
            let g_med = gc + ImageGrads::at(&grads.medium, idx);
            let g_clr = ImageGrads::at(&grads.clear, idx);
            if g_obj == Vector3::zeros() && g_med == Vector3::zeros() && g_clr == Vector3::zeros() {
                medium.push(MediumSample::zeros());
                continue;
            }
            let m = &tape.medium[idx];
            contrib.clear();
            blend(&tape.projections, &tape.rows[y], x, y, |index, alpha, transmittance| {
                contrib.push(Contributor {
                    index,
                    alpha,
                    transmittance,
                })
            });

            let mut d_sigma_attn = Vector3::zeros();
            let mut bs_sum = Vector3::zeros();
            let mut bs_t_sum = Vector3::zeros();
            let mut after = 0.0;
            for c in contrib.iter().rev() {
                let p: &Projection = &tape.projections[c.index];
                let t = p.splat.depth;
                let w = c.transmittance * c.alpha;
                let ea = (-m.sigma_attn * t).map(f64::exp);
                let eb = (-m.sigma_bs * t).map(f64::exp);
                let ea_c = ea.component_mul(&p.color);
                let med_eb = m.c_med.component_mul(&eb);
                let s = g_obj.dot(&ea_c) + g_clr.dot(&p.color) - g_med.dot(&med_eb);

                let sg = &mut splats[c.index];
                sg.color += w * (g_obj.component_mul(&ea) + g_clr);
                sg.depth += w
                    * (-g_obj.dot(&m.sigma_attn.component_mul(&ea_c))
                        + g_med.dot(&m.sigma_bs.component_mul(&med_eb)));
                d_sigma_attn -= (w * t) * ea_c.component_mul(&g_obj);
                bs_sum += w * eb;
                bs_t_sum += (w * t) * eb;

                let d_alpha = c.transmittance * s - after / (1.0 - c.alpha);
                after += w * s;
                if c.alpha < ALPHA_MAX {
                    let (px, py) = (x as f64, y as f64);
                    let d = Vector2::new(px - p.splat.center2d.x, py - p.splat.center2d.y);
                    // α = Λ·exp(-q/2)
                    sg.opacity += d_alpha * c.alpha / p.opacity;
                    let dq = -0.5 * c.alpha * d_alpha;
                    sg.mean += -2.0 * dq * (p.conic * d);
                    sg.conic[0] += dq * d.x * d.x;
                    sg.conic[1] += dq * d.x * d.y;
                    sg.conic[2] += dq * d.y * d.y;
                }
            }
            medium.push(MediumSample {
                sigma_attn: d_sigma_attn,
                sigma_bs: g_med.component_mul(&m.c_med).component_mul(&bs_t_sum),
                c_med: g_med.component_mul(&(Vector3::repeat(1.0) - bs_sum)),
            });
        }
    }
    BlockGrads { splats, medium }
}

/// Chains an image-space gradient through projection into the primitive's
/// own parameters.
fn primitive_grad(g: &GaussianPrimitive, p: &Projection, sg: &SplatGrad, k: &CameraIntrinsics) -> PrimitiveGrad {
    let (x, y, z) = (p.p_cam.x, p.p_cam.y, p.p_cam.z);
    let (fx, fy) = (k.fx, k.fy);
    let j = Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));

    let g_conic = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    let g_cov2 = -p.conic * g_conic * p.conic;

    let rot = g.rotation_matrix();
    let scale = g.scale();
    let l = rot * Matrix3::from_diagonal(&scale);
    let cov3 = l * l.transpose();

    let g_m = 2.0 * g_cov2 * p.m * cov3;
    let g_cov3 = p.m.transpose() * g_cov2 * p.m;
    let g_j = g_m * p.w.transpose();

    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_pc = j.transpose() * sg.mean;
    g_pc.x += g_j[(0, 2)] * (-fx / z2);
    g_pc.y += g_j[(1, 2)] * (-fy / z2);
    g_pc.z += g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * (2.0 * fx * x / z3)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * (2.0 * fy * y / z3)
        + sg.depth;
    let g_mu = p.w.transpose() * g_pc;

    // Σ = L Lᵀ, L = R·diag(s)
    let g_l = 2.0 * g_cov3 * l;
    let mut g_rot = Matrix3::zeros();
    let mut g_log_scale = Vector3::zeros();
    for b in 0..3 {
        for a in 0..3 {
            g_rot[(a, b)] = g_l[(a, b)] * scale[b];
            g_log_scale[b] += g_l[(a, b)] * rot[(a, b)];
        }
        g_log_scale[b] *= scale[b];
    }

    PrimitiveGrad {
        mu: g_mu,
        rot: quaternion_grad(&g.rot.coords, &g_rot),
        log_scale: g_log_scale,
        color: sg.color,
        opacity_logit: sg.opacity * p.opacity * (1.0 - p.opacity),
    }
}

/// Pulls a rotation-matrix gradient back to raw quaternion coordinates
/// `(x, y, z, w)`, including the normalization.
fn quaternion_grad(raw: &Vector4<f64>, g_r: &Matrix3<f64>) -> Vector4<f64> {
    let n = raw.norm();
    let u = raw / n;
    let (x, y, z, w) = (u[0], u[1], u[2], u[3]);
    #[rustfmt::skip]
    let d_w = Matrix3::new(
        0.0, -2.0 * z, 2.0 * y,
        2.0 * z, 0.0, -2.0 * x,
        -2.0 * y, 2.0 * x, 0.0,
    );
    #[rustfmt::skip]
    let d_x = Matrix3::new(
        0.0, 2.0 * y, 2.0 * z,
        2.0 * y, -4.0 * x, -2.0 * w,
        2.0 * z, 2.0 * w, -4.0 * x,
    );
    #[rustfmt::skip]
    let d_y = Matrix3::new(
        -4.0 * y, 2.0 * x, 2.0 * w,
        2.0 * x, 0.0, 2.0 * z,
        -2.0 * w, 2.0 * z, -4.0 * y,
    );
    #[rustfmt::skip]
    let d_z = Matrix3::new(
        -4.0 * z, -2.0 * w, 2.0 * x,
        2.0 * w, -4.0 * z, 2.0 * y,
        2.0 * x, 2.0 * y, 0.0,
    );
    let g_u = Vector4::new(
        g_r.component_mul(&d_x).sum(),
        g_r.component_mul(&d_y).sum(),
        g_r.component_mul(&d_z).sum(),
        g_r.component_mul(&d_w).sum(),
    );
    (g_u - u * u.dot(&g_u)) / n
}

/// Reverse-mode gradients of a taped render.
pub fn render_backward_taped(
    map: &[GaussianPrimitive],
    medium: &MediumNetParams,
    k: &CameraIntrinsics,
    tape: &RenderTape,
    grads: &ImageGrads,
) -> RenderGradients {
    debug_assert_eq!(map.len(), tape.primitive_count);
    let blocks: Vec<BlockGrads> = (0..tape.height)
        .step_by(ROWS_PER_TASK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|y0| backward_rows(tape, grads, y0, (y0 + ROWS_PER_TASK).min(tape.height)))
        .collect();

    let mut splats = vec![SplatGrad::default(); tape.projections.len()];
    let mut medium_grads = Vec::with_capacity(tape.width * tape.height);
    for b in blocks {
        for (acc, s) in splats.iter_mut().zip(&b.splats) {
            acc.add(s);
        }
        medium_grads.extend(b.medium);
    }

    let mut primitives = vec![PrimitiveGrad::default(); map.len()];
    let per_splat: Vec<(usize, PrimitiveGrad)> = tape
        .projections
        .par_iter()
        .zip(&splats)
        .map(|(p, sg)| {
            let i = p.splat.primitive_index;
            (i, primitive_grad(&map[i], p, sg, k))
        })
        .collect();
    for (i, g) in per_splat {
        primitives[i] = g;
    }

    RenderGradients {
        primitives,
        medium: backward_batch(medium, &tape.medium_tape, &medium_grads),
    }
}

/// Renders and back-propagates `grads` in one call.
pub fn render_backward(
    map: &[GaussianPrimitive],
    medium: &MediumNetParams,
    pose: &Sim3Pose,
    k: &CameraIntrinsics,
    grads: &ImageGrads,
) -> Result<RenderGradients, RenderError> {
    let (_, tape) = render_taped(map, medium, pose, k)?;
    Ok(render_backward_taped(map, medium, k, &tape, grads))
}
