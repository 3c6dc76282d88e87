use nalgebra::Vector3;
use rayon::prelude::*;

use super::project::{project_full, Projection};
use super::{RenderOutput, ALPHA_MAX, ALPHA_MIN, TRANSMITTANCE_MIN, VISIBLE_WEIGHT};
use crate::error::RenderError;
use crate::image::Image;
use crate::medium::{forward_batch, MediumNetParams, MediumSample, MediumTape};
use crate::scene::{CameraIntrinsics, GaussianPrimitive, Sim3Pose};

/// Rows handled per parallel task. Fixed so reductions are reproducible.
pub(super) const ROWS_PER_TASK: usize = 4;

/// State kept from a forward pass for [`super::render_backward_taped`].
#[derive(Debug, Clone)]
pub struct RenderTape {
    pub(super) width: usize,
    pub(super) height: usize,
    pub(super) primitive_count: usize,
    /// Depth-sorted projections of the primitives that survived culling.
    pub(super) projections: Vec<Projection>,
    /// Per image row, indices into `projections` in depth order.
    pub(super) rows: Vec<Vec<u32>>,
    pub(super) medium: Vec<MediumSample>,
    pub(super) medium_tape: MediumTape,
}

/// Front-to-back blending at one pixel. `visit(i, α, T)` is called for each
/// contributing projection before transmittance is updated. Returns the
/// final transmittance.
#[inline]
pub(super) fn blend<F: FnMut(usize, f64, f64)>(projections: &[Projection], list: &[u32], x: usize, y: usize, mut visit: F) -> f64 {
    let (px, py) = (x as f64, y as f64);
    let mut t = 1.0;
    for &i in list {
        let p = &projections[i as usize];
        if x < p.bbox.0 || x > p.bbox.2 {
            continue;
        }
        let dx = px - p.splat.center2d.x;
        let dy = py - p.splat.center2d.y;
        let q = p.conic.m11 * dx * dx + 2.0 * p.conic.m12 * dx * dy + p.conic.m22 * dy * dy;
        let alpha = (p.opacity * (-0.5 * q).exp()).min(ALPHA_MAX);
        if alpha < ALPHA_MIN {
            continue;
        }
        visit(i as usize, alpha, t);
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    t
}

/// World-frame unit ray direction per pixel, row-major.
pub(super) fn ray_directions(pose: &Sim3Pose, k: &CameraIntrinsics) -> Vec<Vector3<f64>> {
    let r = pose.rotation_matrix();
    (0..k.height)
        .flat_map(|y| (0..k.width).map(move |x| (x, y)))
        .map(|(x, y)| r * k.ray(x as f64, y as f64).normalize())
        .collect()
}

fn prepare(
    map: &[GaussianPrimitive],
    medium: &MediumNetParams,
    pose: &Sim3Pose,
    k: &CameraIntrinsics,
) -> Result<RenderTape, RenderError> {
    if k.width == 0 || k.height == 0 {
        return Err(RenderError::EmptyImage {
            width: k.width,
            height: k.height,
        });
    }
    let w = pose.rotation_matrix().transpose();
    let t = pose.translation;
    let mut projections: Vec<Projection> = map
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_full(g, i, &w, &t, k))
        .collect();
    projections.sort_by(|a, b| {
        a.splat
            .depth
            .total_cmp(&b.splat.depth)
            .then(a.splat.primitive_index.cmp(&b.splat.primitive_index))
    });
    let mut rows = vec![Vec::new(); k.height];
    for (i, p) in projections.iter().enumerate() {
        for row in &mut rows[p.bbox.1..=p.bbox.3] {
            row.push(i as u32);
        }
    }
    let (samples, medium_tape) = forward_batch(medium, &ray_directions(pose, k));
    Ok(RenderTape {
        width: k.width,
        height: k.height,
        primitive_count: map.len(),
        projections,
        rows,
        medium: samples,
        medium_tape,
    })
}

struct RowBlock {
    composite: Vec<[f64; 3]>,
    object: Vec<[f64; 3]>,
    medium: Vec<[f64; 3]>,
    clear: Vec<[f64; 3]>,
    accum: Vec<f64>,
    final_t: Vec<f64>,
    depth: Vec<f64>,
    visible: Vec<bool>,
}

fn render_rows(tape: &RenderTape, y0: usize, y1: usize) -> RowBlock {
    let n = (y1 - y0) * tape.width;
    let mut b = RowBlock {
        composite: Vec::with_capacity(n),
        object: Vec::with_capacity(n),
        medium: Vec::with_capacity(n),
        clear: Vec::with_capacity(n),
        accum: Vec::with_capacity(n),
        final_t: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        visible: vec![false; tape.projections.len()],
    };
    for y in y0..y1 {
        for x in 0..tape.width {
            let m = &tape.medium[y * tape.width + x];
            let mut obj = Vector3::zeros();
            let mut clr = Vector3::zeros();
            let mut bs = Vector3::zeros();
            let mut acc = 0.0;
            let mut dsum = 0.0;
            let t_final = blend(&tape.projections, &tape.rows[y], x, y, |i, alpha, t| {
                let p = &tape.projections[i];
                let c = &p.color;
                let w = t * alpha;
                let depth = p.splat.depth;
                let ea = (-m.sigma_attn * depth).map(f64::exp);
                let eb = (-m.sigma_bs * depth).map(f64::exp);
                obj += w * ea.component_mul(c);
                clr += w * c;
                bs += w * eb;
                acc += w;
                dsum += w * depth;
                if w > VISIBLE_WEIGHT {
                    b.visible[i] = true;
                }
            });
            let med = m.c_med.component_mul(&(Vector3::repeat(1.0) - bs));
            let comp = obj + med;
            b.composite.push([comp.x, comp.y, comp.z]);
            b.object.push([obj.x, obj.y, obj.z]);
            b.medium.push([med.x, med.y, med.z]);
            b.clear.push([clr.x, clr.y, clr.z]);
            b.accum.push(acc);
            b.final_t.push(t_final);
            b.depth.push(if acc > 0.0 { dsum / acc } else { 0.0 });
        }
    }
    b
}

/// Renders all four modes plus per-pixel diagnostics.
pub fn render(
    map: &[GaussianPrimitive],
    medium: &MediumNetParams,
    pose: &Sim3Pose,
    k: &CameraIntrinsics,
) -> Result<RenderOutput, RenderError> {
    render_taped(map, medium, pose, k).map(|(out, _)| out)
}

/// [`render`], additionally returning the tape needed for the backward pass.
pub fn render_taped(
    map: &[GaussianPrimitive],
    medium: &MediumNetParams,
    pose: &Sim3Pose,
    k: &CameraIntrinsics,
) -> Result<(RenderOutput, RenderTape), RenderError> {
    let tape = prepare(map, medium, pose, k)?;
    let blocks: Vec<RowBlock> = (0..tape.height)
        .step_by(ROWS_PER_TASK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|y0| render_rows(&tape, y0, (y0 + ROWS_PER_TASK).min(tape.height)))
        .collect();

    let (w, h) = (tape.width, tape.height);
    let mut out = RenderOutput {
        composite: Image::new(w, h),
        object: Image::new(w, h),
        medium: Image::new(w, h),
        clear: Image::new(w, h),
        accum_opacity: Vec::with_capacity(w * h),
        final_transmittance: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        visible: Vec::new(),
    };
    let mut visible = vec![false; tape.projections.len()];
    let mut offset = 0;
    for b in blocks {
        let n = b.composite.len();
        out.composite.pixels[offset..offset + n].copy_from_slice(&b.composite);
        out.object.pixels[offset..offset + n].copy_from_slice(&b.object);
        out.medium.pixels[offset..offset + n].copy_from_slice(&b.medium);
        out.clear.pixels[offset..offset + n].copy_from_slice(&b.clear);
        out.accum_opacity.extend(b.accum);
        out.final_transmittance.extend(b.final_t);
        out.depth.extend(b.depth);
        for (v, bv) in visible.iter_mut().zip(b.visible) {
            *v |= bv;
        }
        offset += n;
    }
    out.visible = visible
        .iter()
        .zip(&tape.projections)
        .filter(|(v, _)| **v)
        .map(|(_, p)| p.splat.primitive_index)
        .collect();
    out.visible.sort_unstable();
    Ok((out, tape))
}
