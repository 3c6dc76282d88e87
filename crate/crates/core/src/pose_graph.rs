//! Keyframe graph, loop candidates, and pose-only bundle adjustment.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};

use crate::error::GraphError;
use crate::render::NEAR_PLANE;
use crate::scene::{CameraIntrinsics, Frame, Keyframe, KeyframeId, Match, Sim3Pose};
use crate::tracker::RobustKernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Sequential,
    Loop,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Sequential => "sequential",
            EdgeKind::Loop => "loop",
        })
    }
}

/// Correspondences between two keyframes: `pixel_a` lies in `frame_i`,
/// `pixel_b` in `frame_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub frame_i: KeyframeId,
    pub frame_j: KeyframeId,
    pub matches: Vec<Match>,
    pub kind: EdgeKind,
}

/// Produces pixel correspondences between two frames, identified by their
/// keyframe ids.
pub trait Matcher {
    fn matches(&self, a: KeyframeId, frame_a: &Frame, b: KeyframeId, frame_b: &Frame) -> Vec<Match>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopDetector {
    pub radius: f64,
    /// Candidates must be more than this many ids apart.
    pub min_gap: u32,
}

impl Default for LoopDetector {
    fn default() -> Self {
        Self {
            radius: 1.0,
            min_gap: 20,
        }
    }
}

/// Geometric loop candidates: earlier keyframes within `radius` of the
/// current estimated position and more than `min_gap` ids away. Candidates
/// for which the matcher finds nothing are dropped.
pub fn detect_loops(
    keyframes: &[Keyframe],
    current: &Keyframe,
    detector: &LoopDetector,
    matcher: &dyn Matcher,
) -> Vec<GraphEdge> {
    keyframes
        .iter()
        .filter(|k| k.id != current.id)
        .filter(|k| current.id.abs_diff(k.id) > detector.min_gap)
        .filter(|k| (current.pose.translation - k.pose.translation).norm() < detector.radius)
        .filter_map(|k| {
            let matches = matcher.matches(current.id, &current.frame, k.id, &k.frame);
            (!matches.is_empty()).then(|| GraphEdge {
                frame_i: current.id,
                frame_j: k.id,
                matches,
                kind: EdgeKind::Loop,
            })
        })
        .collect()
}

/// Loop edges from externally supplied `(i, j)` labels.
pub fn edges_from_labels(
    keyframes: &[Keyframe],
    labels: &[(KeyframeId, KeyframeId)],
    matcher: &dyn Matcher,
) -> Result<Vec<GraphEdge>, GraphError> {
    let find = |id: KeyframeId| keyframes.iter().find(|k| k.id == id).ok_or(GraphError::UnknownKeyframe(id));
    let mut out = Vec::new();
    for &(i, j) in labels {
        let (a, b) = (find(i)?, find(j)?);
        let matches = matcher.matches(i, &a.frame, j, &b.frame);
        if !matches.is_empty() {
            out.push(GraphEdge {
                frame_i: i,
                frame_j: j,
                matches,
                kind: EdgeKind::Loop,
            });
        }
    }
    Ok(out)
}

/// Edge list as text, one `i j kind n_matches` line per edge.
pub fn dump_edges(edges: &[GraphEdge]) -> String {
    edges
        .iter()
        .map(|e| format!("{} {} {} {}\n", e.frame_i, e.frame_j, e.kind, e.matches.len()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleAdjustResult {
    /// Poses in the order of the input keyframes.
    pub poses: Vec<Sim3Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

pub const BA_MAX_ITERATIONS: usize = 100;
const BA_STEP_TOLERANCE: f64 = 1e-8;
const BA_MAX_HALVINGS: usize = 8;
const BA_CONDITION_FLOOR: f64 = 1e-14;

struct Residual {
    edge_i: usize,
    edge_j: usize,
    pixel: Vector2<f64>,
    point_j: Vector3<f64>,
    q: f64,
}

fn project(k: &CameraIntrinsics, p: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
}

fn ba_cost(residuals: &[Residual], poses: &[Sim3Pose], k: &CameraIntrinsics, kernel: &RobustKernel) -> f64 {
    residuals
        .iter()
        .map(|r| {
            let p = poses[r.edge_i].apply_inverse(&poses[r.edge_j].apply(&r.point_j));
            if p.z <= NEAR_PLANE {
                return 0.0;
            }
            kernel.cost((r.q * (r.pixel - project(k, &p))).norm())
        })
        .sum()
}

fn check_connected(keyframes: &[Keyframe], edges: &[GraphEdge], index: &HashMap<KeyframeId, usize>) -> Result<(), GraphError> {
    let n = keyframes.len();
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        let i = *index.get(&e.frame_i).ok_or(GraphError::UnknownKeyframe(e.frame_i))?;
        let j = *index.get(&e.frame_j).ok_or(GraphError::UnknownKeyframe(e.frame_j))?;
        if e.matches.iter().any(|m| m.q > 0.0) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(GraphError::Disconnected(keyframes[i].id)),
        None => Ok(()),
    }
}

/// Gauss-Newton over all keyframe poses except the first (gauge, including
/// its scale), minimizing Huber-weighted reprojection error in pixels:
/// `Σ ρ(‖q (p_i − π(T_i⁻¹ T_j X_j))‖)`. Pointmaps stay fixed.
///
/// Every match is used in both directions (j's point into i and i's point
/// into j); one direction alone leaves the relative scale about the
/// observing camera unconstrained.
pub fn global_bundle_adjust(
    keyframes: &[Keyframe],
    edges: &[GraphEdge],
    k: &CameraIntrinsics,
    kernel: &RobustKernel,
) -> Result<BundleAdjustResult, GraphError> {
    if keyframes.is_empty() {
        return Err(GraphError::Empty);
    }
    let index: HashMap<KeyframeId, usize> = keyframes.iter().enumerate().map(|(i, kf)| (kf.id, i)).collect();
    check_connected(keyframes, edges, &index)?;

    let mut poses: Vec<Sim3Pose> = keyframes.iter().map(|kf| kf.pose).collect();
    let mut residuals = Vec::new();
    for e in edges {
        let (i, j) = (index[&e.frame_i], index[&e.frame_j]);
        let (wi, wj) = (keyframes[i].frame.width(), keyframes[j].frame.width());
        for m in e.matches.iter().filter(|m| m.q > 0.0) {
            residuals.push(Residual {
                edge_i: i,
                edge_j: j,
                pixel: Vector2::new(m.pixel_a.0 as f64, m.pixel_a.1 as f64),
                point_j: keyframes[j].frame.pointmap[m.index_b(wj)],
                q: m.q,
            });
            residuals.push(Residual {
                edge_i: j,
                edge_j: i,
                pixel: Vector2::new(m.pixel_b.0 as f64, m.pixel_b.1 as f64),
                point_j: keyframes[i].frame.pointmap[m.index_a(wi)],
                q: m.q,
            });
        }
    }

    let free = keyframes.len() - 1;
    let initial_cost = ba_cost(&residuals, &poses, k, kernel);
    let mut cost = initial_cost;
    let mut result = BundleAdjustResult {
        poses: poses.clone(),
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        converged: free == 0,
        diagnostic: None,
    };
    if free == 0 {
        return Ok(result);
    }

    let dim = 7 * free;
    while result.iterations < BA_MAX_ITERATIONS {
        result.iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for r in &residuals {
            let (ti, tj) = (&poses[r.edge_i], &poses[r.edge_j]);
            let y = tj.apply(&r.point_j);
            let p = ti.apply_inverse(&y);
            if p.z <= NEAR_PLANE {
                continue;
            }
            let res = r.q * (r.pixel - project(k, &p));
            let w = kernel.weight(res.norm());
            let jpi = Matrix2x3::new(
                k.fx / p.z,
                0.0,
                -k.fx * p.x / (p.z * p.z),
                0.0,
                k.fy / p.z,
                -k.fy * p.y / (p.z * p.z),
            );
            // ∂Y/∂(ω, v, σ) for a left increment on T_j
            let mut g = SMatrix::<f64, 3, 7>::zeros();
            g.fixed_view_mut::<3, 3>(0, 0).copy_from(&-skew(&y));
            g.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            g.fixed_view_mut::<3, 1>(0, 6).copy_from(&y);
            let a = ti.rotation_matrix().transpose() / ti.scale;
            let jj: SMatrix<f64, 2, 7> = -r.q * jpi * a * g;
            let ji = -jj;
            let blocks = [(r.edge_i, ji), (r.edge_j, jj)];
            for (vi, ja) in &blocks {
                if *vi == 0 {
                    continue;
                }
                let oa = 7 * (vi - 1);
                let mut bv = b.fixed_rows_mut::<7>(oa);
                bv -= w * ja.transpose() * res;
                for (vj, jb) in &blocks {
                    if *vj == 0 {
                        continue;
                    }
                    let ob = 7 * (vj - 1);
                    let mut hv = h.fixed_view_mut::<7, 7>(oa, ob);
                    hv += w * ja.transpose() * jb;
                }
            }
        }
        let eig = h.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo < BA_CONDITION_FLOOR * hi {
            result.poses = keyframes.iter().map(|kf| kf.pose).collect();
            result.final_cost = initial_cost;
            result.converged = false;
            result.diagnostic = Some(format!("rank-deficient bundle adjustment (eigenvalues {lo:.3e}..{hi:.3e})"));
            return Ok(result);
        }
        let Some(chol) = h.cholesky() else {
            result.poses = keyframes.iter().map(|kf| kf.pose).collect();
            result.final_cost = initial_cost;
            result.diagnostic = Some("normal equations are not positive definite".to_string());
            return Ok(result);
        };
        let mut step = chol.solve(&b);
        let mut accepted = false;
        for _ in 0..=BA_MAX_HALVINGS {
            let candidate: Vec<Sim3Pose> = poses
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if i == 0 {
                        return *p;
                    }
                    let s = step.fixed_rows::<7>(7 * (i - 1));
                    p.retract_left(&Vector3::new(s[0], s[1], s[2]), &Vector3::new(s[3], s[4], s[5]), s[6])
                })
                .collect();
            let c = ba_cost(&residuals, &candidate, k, kernel);
            if c <= cost {
                poses = candidate;
                cost = c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < BA_STEP_TOLERANCE {
            result.converged = true;
            break;
        }
    }
    result.poses = poses;
    result.final_cost = cost;
    Ok(result)
}

fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

/// Mean unweighted reprojection error, in pixels, over positive-weight
/// matches in both directions.
pub fn mean_reprojection_error(keyframes: &[Keyframe], poses: &[Sim3Pose], edges: &[GraphEdge], k: &CameraIntrinsics) -> f64 {
    let index: HashMap<KeyframeId, usize> = keyframes.iter().enumerate().map(|(i, kf)| (kf.id, i)).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    let mut add = |obs: usize, src: usize, pixel: (u32, u32), x: &Vector3<f64>| {
        let p = poses[obs].apply_inverse(&poses[src].apply(x));
        sum += (Vector2::new(pixel.0 as f64, pixel.1 as f64) - project(k, &p)).norm();
        n += 1;
    };
    for e in edges {
        let (i, j) = (index[&e.frame_i], index[&e.frame_j]);
        let (wi, wj) = (keyframes[i].frame.width(), keyframes[j].frame.width());
        for m in e.matches.iter().filter(|m| m.q > 0.0) {
            add(i, j, m.pixel_a, &keyframes[j].frame.pointmap[m.index_b(wj)]);
            add(j, i, m.pixel_b, &keyframes[i].frame.pointmap[m.index_a(wi)]);
        }
    }
    sum / n.max(1) as f64
}
