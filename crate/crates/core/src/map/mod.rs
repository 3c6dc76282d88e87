//! The global Gaussian map and everything that mutates it.

mod checkpoint;
mod optim;

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Quaternion, Vector3};
use rand::Rng;

use crate::error::MapError;
use crate::medium::MediumNetParams;
use crate::render::RenderOutput;
use crate::scene::{logit, pose_delta_metrics, GaussianPrimitive, Keyframe, KeyframeId, Sim3Pose};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, LearningRates, StepReport};

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    /// Accumulated-opacity threshold below which a pixel is considered
    /// uncovered.
    pub tau_a: f64,
    pub d_thresh: f64,
    /// Degrees.
    pub theta_thresh: f64,
    pub global_thresh: f64,
    pub voxel_size: f64,
    pub new_kf_iters: usize,
    pub refine_kf_count: usize,
    pub refine_iters: usize,
    /// Keep one candidate per block of this many pixels (a square cell).
    pub densify_downsample: usize,
    /// New-primitive scale as a multiple of the median candidate spacing.
    pub init_scale_factor: f64,
    pub learning_rates: LearningRates,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            tau_a: 0.9,
            d_thresh: 0.15,
            theta_thresh: 7.0,
            global_thresh: 0.3,
            voxel_size: 0.35,
            new_kf_iters: 50,
            refine_kf_count: 5,
            refine_iters: 40,
            densify_downsample: 16,
            init_scale_factor: 0.75,
            learning_rates: LearningRates::default(),
            seed: 0,
        }
    }
}

impl MapConfig {
    pub fn is_valid(&self) -> bool {
        self.tau_a > 0.0
            && self.d_thresh > 0.0
            && self.theta_thresh > 0.0
            && self.global_thresh > 0.0
            && self.global_thresh <= 1.0
            && self.voxel_size > 0.0
            && self.densify_downsample > 0
            && self.init_scale_factor > 0.0
            && self.learning_rates.is_valid()
    }

    /// Side of the square densification cell.
    pub fn cell_size(&self) -> usize {
        ((self.densify_downsample as f64).sqrt().round() as usize).max(1)
    }
}

/// Primitives plus the medium network, with optimizer state kept alongside.
#[derive(Debug, Clone)]
pub struct GaussianMap {
    pub primitives: Vec<GaussianPrimitive>,
    pub medium: MediumNetParams,
    /// Scene extent used to scale the position learning rate.
    pub extent: f64,
    adam: Adam,
}

impl PartialEq for GaussianMap {
    fn eq(&self, other: &Self) -> bool {
        self.primitives == other.primitives && self.medium == other.medium
    }
}

impl GaussianMap {
    pub fn new(medium: MediumNetParams) -> Self {
        Self {
            primitives: Vec::new(),
            medium,
            extent: 1.0,
            adam: Adam::default(),
        }
    }

    pub fn with_primitives(primitives: Vec<GaussianPrimitive>, medium: MediumNetParams) -> Self {
        let mut m = Self::new(medium);
        m.add_primitives(primitives);
        m
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn add_primitives(&mut self, new: Vec<GaussianPrimitive>) {
        self.adam.grow(new.len());
        self.primitives.extend(new);
    }

    pub fn count_anchored(&self, ids: &[KeyframeId]) -> usize {
        self.primitives.iter().filter(|p| ids.contains(&p.anchor)).count()
    }

    /// Applies the Sim(3) delta of each primitive's anchor keyframe:
    /// `S' = (s'/s) S`, `R' = R'_k R_k⁻¹ R`, `μ' = T'_k T_k⁻¹ μ`. Primitives
    /// whose anchor did not move are left untouched. Returns the number of
    /// primitives changed.
    pub fn adjust_primitives(
        &mut self,
        old_poses: &HashMap<KeyframeId, Sim3Pose>,
        new_poses: &HashMap<KeyframeId, Sim3Pose>,
    ) -> Result<usize, MapError> {
        for p in &self.primitives {
            if !old_poses.contains_key(&p.anchor) || !new_poses.contains_key(&p.anchor) {
                return Err(MapError::MissingAnchor(p.anchor));
            }
        }
        let mut changed = 0;
        for p in &mut self.primitives {
            let (old, new) = (&old_poses[&p.anchor], &new_poses[&p.anchor]);
            if old == new {
                continue;
            }
            let delta = new.compose(&old.inverse());
            p.mu = delta.apply(&p.mu);
            p.rot = delta.rotation.into_inner() * p.rot;
            p.log_scale += Vector3::repeat(delta.scale.ln());
            changed += 1;
        }
        Ok(changed)
    }

    /// Voxel-merges the primitives anchored to `frame_a` or `frame_b`. Each
    /// occupied voxel (grid of `voxel_size` anchored at the origin) collapses
    /// to one primitive with averaged attributes; it takes the slot of the
    /// voxel's first member so map order stays deterministic. Returns the
    /// number of primitives removed.
    pub fn merge_primitives<R: Rng>(
        &mut self,
        frame_a: KeyframeId,
        frame_b: KeyframeId,
        keyframe_ids: &[KeyframeId],
        cfg: &MapConfig,
        rng: &mut R,
    ) -> Result<usize, MapError> {
        for id in [frame_a, frame_b] {
            if !keyframe_ids.contains(&id) {
                return Err(MapError::UnknownFrame(id));
            }
        }
        let mut voxels: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in self.primitives.iter().enumerate() {
            if p.anchor == frame_a || p.anchor == frame_b {
                let key = p.mu.map(|v| (v / cfg.voxel_size).floor() as i64);
                voxels.entry([key.x, key.y, key.z]).or_default().push(i);
            }
        }
        let mut groups: Vec<Vec<usize>> = voxels.into_values().filter(|g| g.len() > 1).collect();
        groups.sort_by_key(|g| g[0]);

        let mut remove = vec![false; self.primitives.len()];
        for g in &groups {
            let members: Vec<&GaussianPrimitive> = g.iter().map(|&i| &self.primitives[i]).collect();
            let merged = merge_group(&members, rng);
            self.primitives[g[0]] = merged;
            self.adam.reset(g[0]);
            for &i in &g[1..] {
                remove[i] = true;
            }
        }
        let removed = remove.iter().filter(|&&r| r).count();
        let mut keep = remove.iter().map(|r| !r);
        self.primitives.retain(|_| keep.next().unwrap());
        self.adam.retain(&remove);
        Ok(removed)
    }
}

fn merge_group<R: Rng>(members: &[&GaussianPrimitive], rng: &mut R) -> GaussianPrimitive {
    let n = members.len() as f64;
    let mean3 = |f: &dyn Fn(&GaussianPrimitive) -> Vector3<f64>| members.iter().map(|p| f(p)).sum::<Vector3<f64>>() / n;
    let first = members[0].rot.coords;
    let rot_sum = members
        .iter()
        .map(|p| if p.rot.coords.dot(&first) < 0.0 { -p.rot.coords } else { p.rot.coords })
        .sum::<nalgebra::Vector4<f64>>();
    let rot = Quaternion::from(rot_sum / rot_sum.norm());
    let opacity = members.iter().map(|p| p.opacity()).sum::<f64>() / n;
    let anchor = members[rng.gen_range(0..members.len())].anchor;
    GaussianPrimitive {
        mu: mean3(&|p| p.mu),
        rot,
        log_scale: mean3(&|p| p.scale()).map(f64::ln),
        color: mean3(&|p| p.color),
        opacity_logit: logit(opacity),
        anchor,
    }
}

/// New primitives for the uncovered, non-water pixels of a keyframe. Within
/// each square cell of `densify_downsample` pixels the first candidate in
/// row-major order is kept. Pixels with zero confidence carry no usable
/// geometry and are skipped.
pub fn densify(kf: &Keyframe, render: &RenderOutput, cfg: &MapConfig, use_water_mask: bool) -> Vec<GaussianPrimitive> {
    let frame = &kf.frame;
    let (w, h) = (frame.width(), frame.height());
    let cell = cfg.cell_size();
    let candidate = |i: usize| {
        (!use_water_mask || !frame.water_mask[i])
            && render.accum_opacity[i] < cfg.tau_a
            && frame.confidence[i] > 0.0
            && frame.pointmap[i].iter().all(|v| v.is_finite())
            && frame.pointmap[i].z > 0.0
    };
    let mut picked = Vec::new();
    for cy in (0..h).step_by(cell) {
        for cx in (0..w).step_by(cell) {
            'cell: for y in cy..(cy + cell).min(h) {
                for x in cx..(cx + cell).min(w) {
                    let i = y * w + x;
                    if candidate(i) {
                        picked.push(i);
                        break 'cell;
                    }
                }
            }
        }
    }
    let points: Vec<Vector3<f64>> = picked.iter().map(|&i| kf.pose.apply(&frame.pointmap[i])).collect();
    let scale = match median_nn_spacing(&points) {
        Some(d) => cfg.init_scale_factor * d,
        None => match picked.first() {
            // lone candidate: one cell's footprint at its depth
            Some(&i) => cfg.init_scale_factor * cell as f64 * frame.pointmap[i].z * kf.pose.scale / (w.max(1) as f64),
            None => return Vec::new(),
        },
    };
    picked
        .iter()
        .zip(&points)
        .map(|(&i, mu)| {
            let c = frame.image.pixels[i];
            GaussianPrimitive::isotropic(*mu, scale, Vector3::new(c[0], c[1], c[2]), 0.5, kf.id)
        })
        .collect()
}

fn median_nn_spacing(points: &[Vector3<f64>]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .filter(|d| *d > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Per-keyframe re-render flags (translation or rotation change above
/// threshold) and whether enough of them are set to trigger global mapping.
pub fn mark_rerender(old: &[Sim3Pose], new: &[Sim3Pose], cfg: &MapConfig) -> (Vec<bool>, bool) {
    let flags: Vec<bool> = old
        .iter()
        .zip(new)
        .map(|(a, b)| {
            let (d, theta) = pose_delta_metrics(a, b);
            d > cfg.d_thresh || theta > cfg.theta_thresh
        })
        .collect();
    let n = flags.iter().filter(|&&f| f).count();
    let global = !flags.is_empty() && n as f64 / flags.len() as f64 > cfg.global_thresh;
    (flags, global)
}

/// Attribute vector in checkpoint order: μ, quaternion `(x, y, z, w)`,
/// log-scale, color, opacity logit.
pub fn primitive_to_array(p: &GaussianPrimitive) -> [f64; 14] {
    let mut a = [0.0; 14];
    a[0..3].copy_from_slice(p.mu.as_slice());
    a[3..7].copy_from_slice(p.rot.coords.as_slice());
    a[7..10].copy_from_slice(p.log_scale.as_slice());
    a[10..13].copy_from_slice(p.color.as_slice());
    a[13] = p.opacity_logit;
    a
}

pub fn primitive_from_array(a: &[f64; 14], anchor: KeyframeId) -> GaussianPrimitive {
    GaussianPrimitive {
        mu: Vector3::new(a[0], a[1], a[2]),
        rot: Quaternion::new(a[6], a[3], a[4], a[5]),
        log_scale: Vector3::new(a[7], a[8], a[9]),
        color: Vector3::new(a[10], a[11], a[12]),
        opacity_logit: a[13],
        anchor,
    }
}

#[cfg(test)]
mod tests;
