//! Synthetic ground truth: scenes, trajectories, and the sensor stream
//! (images, masks, pointmaps, confidences, matches) seen along them.
//!
//! World convention matches the camera's: x right, y down, z forward. Scene
//! surfaces sit around z = 0 and cameras look at them from z ≈ −`CAMERA_DISTANCE`.

mod dataset;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::medium::{MediumNetParams, MediumSample};
use crate::pose_graph::Matcher;
use crate::render::{render, RenderOutput};
use crate::scene::{logit, CameraIntrinsics, Frame, GaussianPrimitive, KeyframeId, Match, Sim3Pose};

pub use dataset::{read_dataset, write_dataset, Dataset};

/// Distance from the scene center to the reference camera.
pub const CAMERA_DISTANCE: f64 = 2.2;
/// Half-size of the sampled surfaces.
pub const SCENE_HALF_SIZE: f64 = 1.6;
/// Pixels whose ground-truth accumulated opacity is below this are water.
pub const WATER_THRESHOLD: f64 = 0.5;
/// Camera-frame depth assigned to pixels that see no surface at all.
pub const WATER_POINT_DEPTH: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Plane,
    BoxRoom,
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Orbit,
    Lawnmower,
    Loop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownName(pub String);

impl fmt::Display for UnknownName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown name {:?}", self.0)
    }
}

impl std::error::Error for UnknownName {}

impl FromStr for Layout {
    type Err = UnknownName;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plane" => Ok(Layout::Plane),
            "box-room" => Ok(Layout::BoxRoom),
            "ridge" => Ok(Layout::Ridge),
            _ => Err(UnknownName(s.to_string())),
        }
    }
}

impl FromStr for TrajectoryKind {
    type Err = UnknownName;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "orbit" => Ok(TrajectoryKind::Orbit),
            "lawnmower" => Ok(TrajectoryKind::Lawnmower),
            "loop" => Ok(TrajectoryKind::Loop),
            _ => Err(UnknownName(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_primitives: usize,
    pub layout: Layout,
    /// Target fraction of water pixels in the reference view.
    pub water_fraction: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub trajectory: TrajectoryKind,
    pub n_frames: usize,
    /// Standard deviation of pointmap noise, scene units.
    pub pointmap_sigma: f64,
    pub confidence_floor: f64,
    pub outlier_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_primitives: 200,
            layout: Layout::Plane,
            water_fraction: 0.3,
            seed: 0,
            width: 64,
            height: 64,
            fov_deg: 60.0,
            trajectory: TrajectoryKind::Orbit,
            n_frames: 20,
            pointmap_sigma: 0.0,
            confidence_floor: 0.1,
            outlier_fraction: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn is_valid(&self) -> bool {
        self.n_primitives > 0
            && self.width > 0
            && self.height > 0
            && self.n_frames >= 2
            && (0.0..=1.0).contains(&self.water_fraction)
            && (0.0..=1.0).contains(&self.confidence_floor)
            && (0.0..=1.0).contains(&self.outlier_fraction)
            && self.pointmap_sigma >= 0.0
            && self.fov_deg > 0.0
            && self.fov_deg < 180.0
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::with_fov(self.width, self.height, self.fov_deg)
    }
}

/// Default blue-shifted, water-like constant medium.
pub fn default_medium() -> MediumSample {
    MediumSample {
        sigma_attn: Vector3::new(0.10, 0.06, 0.04),
        sigma_bs: Vector3::new(0.02, 0.05, 0.08),
        c_med: Vector3::new(0.05, 0.25, 0.35),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruthMedium {
    Constant(MediumSample),
    Network(MediumNetParams),
}

impl GroundTruthMedium {
    pub fn params(&self) -> MediumNetParams {
        match self {
            GroundTruthMedium::Constant(s) => round_params(MediumNetParams::constant(s)),
            GroundTruthMedium::Network(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub primitives: Vec<GaussianPrimitive>,
    pub medium: GroundTruthMedium,
    /// Axis-aligned bounds of the primitive centers.
    pub bounds: (Vector3<f64>, Vector3<f64>),
}

impl GroundTruthScene {
    /// Diagonal of the bounding box.
    pub fn extent(&self) -> f64 {
        (self.bounds.1 - self.bounds.0).norm()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.primitives.iter().map(|p| p.mu).sum::<Vector3<f64>>() / self.primitives.len().max(1) as f64
    }
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn round_params(mut p: MediumNetParams) -> MediumNetParams {
    p.as_mut_slice().iter_mut().for_each(|v| *v = f32_exact(*v));
    p
}

/// Rounds every attribute to the nearest `f32` so checkpoints of ground
/// truth are exact.
fn round_primitive(mut p: GaussianPrimitive) -> GaussianPrimitive {
    p.mu = p.mu.map(f32_exact);
    p.rot.coords = p.rot.coords.map(f32_exact);
    p.log_scale = p.log_scale.map(f32_exact);
    p.color = p.color.map(f32_exact);
    p.opacity_logit = f32_exact(p.opacity_logit);
    p
}

const PALETTE: [[f64; 3]; 8] = [
    [0.76, 0.70, 0.50], // sand
    [0.85, 0.45, 0.35], // coral
    [0.45, 0.42, 0.40], // rock
    [0.30, 0.55, 0.30], // algae
    [0.90, 0.80, 0.60], // shell
    [0.60, 0.30, 0.55], // sponge
    [0.20, 0.25, 0.30], // dark rock
    [0.95, 0.60, 0.20], // fish
];

/// Surface samples of a layout: a point and the area weight of the surface
/// it came from.
fn sample_surface(layout: Layout, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let s = SCENE_HALF_SIZE;
    let u = rng.gen_range(-s..s);
    let v = rng.gen_range(-s..s);
    match layout {
        Layout::Plane => Vector3::new(u, v, rng.gen_range(-0.02..0.02)),
        Layout::Ridge => Vector3::new(u, v, 0.8 * u.abs() / s - 0.4 + 0.15 * (2.0 * v).sin()),
        Layout::BoxRoom => {
            // back wall, floor, and two side walls, chosen by area
            let depth = 1.4;
            let areas = [4.0 * s * s, 2.0 * s * depth, 2.0 * s * depth, 2.0 * s * depth];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let w = rng.gen_range(-depth..0.0) + 0.3;
            match face {
                0 => Vector3::new(u, v, 0.3),
                1 => Vector3::new(u, 0.8 * s, w),
                2 => Vector3::new(-s, v, w),
                _ => Vector3::new(s, v, w),
            }
        }
    }
}

/// Whether a world point lies below the water line of the reference view
/// (camera at `(0, 0, −CAMERA_DISTANCE)` looking along +z).
fn below_water_line(p: &Vector3<f64>, k: &CameraIntrinsics, water_fraction: f64) -> bool {
    let z = p.z + CAMERA_DISTANCE;
    if z <= 0.0 {
        return false;
    }
    let row = water_fraction * k.height as f64 - 0.5;
    p.y >= z * (row - k.cy) / k.fy
}

/// Deterministic scene for a spec. Primitive centers are spread by best-
/// candidate sampling over the layout, restricted to the region below the
/// water line so roughly `water_fraction` of the reference view is empty.
pub fn generate_scene(spec: &SceneSpec) -> GroundTruthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.intrinsics();
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(spec.n_primitives);
    const CANDIDATES: usize = 8;
    const MAX_TRIES: usize = 10_000;
    while centers.len() < spec.n_primitives {
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for _ in 0..CANDIDATES {
            let mut p = sample_surface(spec.layout, &mut rng);
            let mut tries = 0;
            while !below_water_line(&p, &k, spec.water_fraction) && tries < MAX_TRIES {
                p = sample_surface(spec.layout, &mut rng);
                tries += 1;
            }
            let d = centers.iter().map(|c| (c - p).norm_squared()).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, p));
            }
        }
        centers.push(best.unwrap().1);
    }

    // size primitives from the typical spacing so surfaces close up
    let spacing = {
        let mut nn: Vec<f64> = centers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                centers
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, o)| (c - o).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .filter(|d| d.is_finite())
            .collect();
        nn.sort_by(f64::total_cmp);
        nn.get(nn.len() / 2).copied().unwrap_or(0.2)
    };
    let primitives = centers
        .iter()
        .map(|&mu| {
            let base = 0.75 * spacing;
            let log_scale = Vector3::from_fn(|_, _| (base * rng.gen_range(0.85..1.15)).ln());
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let rot = UnitQuaternion::from_scaled_axis(axis).into_inner();
            let c = PALETTE[rng.gen_range(0..PALETTE.len())];
            round_primitive(GaussianPrimitive {
                mu,
                rot,
                log_scale,
                color: Vector3::new(c[0], c[1], c[2]),
                opacity_logit: logit(rng.gen_range(0.6..0.95)),
                anchor: 0,
            })
        })
        .collect::<Vec<_>>();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in &primitives {
        lo = lo.inf(&p.mu);
        hi = hi.sup(&p.mu);
    }
    let m = default_medium();
    GroundTruthScene {
        primitives,
        medium: GroundTruthMedium::Constant(MediumSample {
            sigma_attn: m.sigma_attn.map(f32_exact),
            sigma_bs: m.sigma_bs.map(f32_exact),
            c_med: m.c_med.map(f32_exact),
        }),
        bounds: (lo, hi),
    }
}

/// World-from-camera pose at `eye` looking at `target`, image y pointing
/// as close to world +y as possible.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Sim3Pose {
    let z = (target - eye).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    Sim3Pose::from_rigid(UnitQuaternion::from_rotation_matrix(&r), eye)
}

/// Radius of the loop trajectory.
pub const LOOP_RADIUS: f64 = 1.0;
/// Half-angle of the orbit arc, radians.
pub const ORBIT_HALF_ANGLE: f64 = 0.5;

/// Camera path for a spec. All poses have unit scale and look at the scene
/// center; the loop's last pose coincides with its first.
pub fn generate_trajectory(spec: &SceneSpec) -> Vec<Sim3Pose> {
    let n = spec.n_frames.max(2);
    let center = Vector3::zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x5eed));
    // a small seeded phase makes trajectories differ across seeds
    let phase = rng.gen_range(-0.2..0.2);
    (0..n)
        .map(|i| {
            let f = i as f64 / (n - 1) as f64;
            let eye = match spec.trajectory {
                TrajectoryKind::Orbit => {
                    let a = -ORBIT_HALF_ANGLE + 2.0 * ORBIT_HALF_ANGLE * f + phase * 0.1;
                    Vector3::new(CAMERA_DISTANCE * a.sin(), 0.0, -CAMERA_DISTANCE * a.cos())
                }
                TrajectoryKind::Lawnmower => {
                    let rows = 3;
                    let per_row = n.div_ceil(rows);
                    let row = i / per_row;
                    let t = (i % per_row) as f64 / (per_row.max(2) - 1) as f64;
                    let t = if row % 2 == 0 { t } else { 1.0 - t };
                    Vector3::new(-0.6 + 1.2 * t, -0.3 + 0.3 * row as f64 + phase * 0.1, -CAMERA_DISTANCE)
                }
                TrajectoryKind::Loop => {
                    let a = std::f64::consts::TAU * f + phase;
                    let (s, c) = a.sin_cos();
                    Vector3::new(
                        LOOP_RADIUS * c,
                        0.5 * LOOP_RADIUS * s,
                        -CAMERA_DISTANCE + 0.3 * (2.0 * (a - phase)).sin(),
                    )
                }
            };
            let target = match spec.trajectory {
                TrajectoryKind::Lawnmower => Vector3::new(eye.x, eye.y, 0.0),
                _ => center,
            };
            look_at(eye, target)
        })
        .collect()
}

/// Stream-specific RNG for frame `index`.
fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Sensor frame seen from `pose`: the composite render of the ground truth,
/// a water mask from its accumulated opacity, a pointmap at the blended
/// depth (a fixed far depth where nothing is seen) with seeded noise,
/// confidences `clamp(A, floor, 1)`, and zero-confidence outliers.
pub fn synthesize_frame(
    scene: &GroundTruthScene,
    pose: &Sim3Pose,
    k: &CameraIntrinsics,
    spec: &SceneSpec,
    index: usize,
) -> Frame {
    let out = render(&scene.primitives, &scene.medium.params(), pose, k).expect("valid intrinsics");
    frame_from_render(out, k, spec, index)
}

pub fn frame_from_render(out: RenderOutput, k: &CameraIntrinsics, spec: &SceneSpec, index: usize) -> Frame {
    let mut rng = frame_rng(spec.seed, index);
    let noise = Normal::new(0.0, spec.pointmap_sigma.max(0.0)).unwrap();
    let n = k.pixel_count();
    let mut pointmap = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut water_mask = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = ((i % k.width) as f64, (i / k.width) as f64);
        let a = out.accum_opacity[i];
        // water carries no trustworthy geometry: it becomes a backdrop that moves
        // with the camera, so its correspondences look plausible but are wrong
        let depth = if a >= WATER_THRESHOLD && out.depth[i] > 0.0 { out.depth[i] } else { WATER_POINT_DEPTH };
        let mut p = k.unproject(x, y, depth);
        if spec.pointmap_sigma > 0.0 {
            p += Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
        }
        pointmap.push(p);
        confidence.push(a.clamp(spec.confidence_floor, 1.0));
        water_mask.push(a < WATER_THRESHOLD);
    }
    if spec.outlier_fraction > 0.0 {
        let count = ((spec.outlier_fraction * n as f64).round() as usize).min(n);
        for i in rand::seq::index::sample(&mut rng, n, count) {
            pointmap[i] = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(0.1..10.0));
            confidence[i] = 0.0;
        }
    }
    Frame {
        image: out.composite,
        water_mask,
        pointmap,
        confidence,
        timestamp: index as f64,
    }
}

/// Scene, trajectory and every frame for a spec, as an in-memory dataset.
/// Frames are synthesized in parallel; each depends only on its index.
pub fn simulate(spec: &SceneSpec) -> (GroundTruthScene, Dataset) {
    use rayon::prelude::*;
    let scene = generate_scene(spec);
    let poses = generate_trajectory(spec);
    let k = spec.intrinsics();
    let frames = poses
        .par_iter()
        .enumerate()
        .map(|(i, p)| synthesize_frame(&scene, p, &k, spec, i))
        .collect();
    let medium_gt = match &scene.medium {
        GroundTruthMedium::Constant(m) => Some(*m),
        GroundTruthMedium::Network(_) => None,
    };
    let data = Dataset {
        intrinsics: k,
        frames,
        gt_poses: Some(poses),
        medium_gt,
    };
    (scene, data)
}

/// Ground-truth correspondences: every `stride`-th pixel of frame `b` is
/// reprojected through the true poses into frame `a` and matched to the
/// nearest pixel. Reprojections farther than `subpixel_tol` from a pixel
/// center, or disagreeing in depth with `a`'s own pointmap by more than
/// `occlusion_tol` (relative), are dropped. Water pixels have no texture
/// to match; like a learned matcher they are paired with the same pixel of
/// `a` when that is water too, which is consistent with the camera-attached
/// backdrop in their pointmaps but not with the true motion.
#[derive(Debug, Clone)]
pub struct GroundTruthMatcher {
    pub poses: Vec<Sim3Pose>,
    pub intrinsics: CameraIntrinsics,
    pub stride: usize,
    pub subpixel_tol: f64,
    pub occlusion_tol: f64,
}

impl GroundTruthMatcher {
    pub fn new(poses: Vec<Sim3Pose>, intrinsics: CameraIntrinsics) -> Self {
        Self {
            poses,
            intrinsics,
            stride: 1,
            subpixel_tol: 0.5,
            occlusion_tol: 0.1,
        }
    }

    /// Matches with `pixel_a` in frame `a` and `pixel_b` in frame `b`.
    pub fn match_frames(&self, a: usize, frame_a: &Frame, b: usize, frame_b: &Frame) -> Vec<Match> {
        let k = &self.intrinsics;
        let w = frame_b.width();
        let rel = self.poses[a].inverse().compose(&self.poses[b]);
        let mut out = Vec::new();
        for idx in (0..frame_b.pixel_count()).step_by(self.stride.max(1)) {
            let (x, y) = ((idx % w) as u32, (idx / w) as u32);
            if frame_b.water_mask[idx] {
                if frame_a.water_mask[idx] {
                    out.push(Match::new((x, y), (x, y), frame_a.confidence[idx], frame_b.confidence[idx]));
                }
                continue;
            }
            let p = rel.apply(&frame_b.pointmap[idx]);
            if p.z <= 0.01 {
                continue;
            }
            let uv = k.project(&p);
            if (uv.x - uv.x.round()).abs() > self.subpixel_tol || (uv.y - uv.y.round()).abs() > self.subpixel_tol {
                continue;
            }
            let Some((u, v)) = k.pixel_of(&uv) else { continue };
            let ia = v * frame_a.width() + u;
            let za = frame_a.pointmap[ia].z;
            if (za - p.z).abs() > self.occlusion_tol * p.z {
                continue;
            }
            out.push(Match::new(
                (u as u32, v as u32),
                (x, y),
                frame_a.confidence[ia],
                frame_b.confidence[idx],
            ));
        }
        out
    }
}

impl Matcher for GroundTruthMatcher {
    fn matches(&self, a: KeyframeId, frame_a: &Frame, b: KeyframeId, frame_b: &Frame) -> Vec<Match> {
        self.match_frames(a as usize, frame_a, b as usize, frame_b)
    }
}

/// Keyframe pairs whose true positions are within `radius` and whose ids
/// differ by more than `min_gap`; each later keyframe is paired with its
/// closest earlier candidate.
pub fn ground_truth_loops(
    ids: &[KeyframeId],
    poses: &[Sim3Pose],
    radius: f64,
    min_gap: u32,
) -> Vec<(KeyframeId, KeyframeId)> {
    let mut out = Vec::new();
    for &i in ids {
        let best = ids
            .iter()
            .filter(|&&j| j < i && i - j > min_gap)
            .map(|&j| (j, (poses[i as usize].translation - poses[j as usize].translation).norm()))
            .filter(|(_, d)| *d < radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            out.push((i, j));
        }
    }
    out
}
