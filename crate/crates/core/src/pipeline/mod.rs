//! The full SLAM loop: tracking → keyframing → densify → optimize →
//! loop detection and bundle adjustment → primitive adjustment and merging.
//!
//! A front end (tracking, keyframing, pose graph) turns frames into
//! [`MapEvent`]s; a [`Mapper`] owns the Gaussian map and applies them in
//! order. The front end never reads the map, so running the mapper on its
//! own thread (`parallel`) yields exactly the sequential result.

mod config;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::mpsc;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MapError, SlamError};
use crate::harness::{ground_truth_loops, Dataset, GroundTruthMatcher};
use crate::map::{densify, mark_rerender, GaussianMap, StepReport};
use crate::medium::{medium_init, MediumNetParams};
use crate::pose_graph::{detect_loops, edges_from_labels, global_bundle_adjust, EdgeKind, GraphEdge};
use crate::render::render;
use crate::scene::trajectory::TrajectoryEntry;
use crate::scene::{CameraIntrinsics, Frame, Keyframe, KeyframeId, Sim3Pose};
use crate::tracker::{estimate_pose, keyframe_decision, mask_confidence, world_pose, TrackResult};

pub use config::{LoopSource, SlamConfig};

/// Largest scale change between a frame and its keyframe accepted from the
/// tracker before the run is declared diverged.
const MAX_SCALE_RATIO: f64 = 1e3;

#[derive(Debug, Clone)]
pub enum MapEvent {
    NewKeyframe(Keyframe),
    /// Bundle adjustment moved keyframes; `pair` is the loop that caused it.
    PosesUpdated {
        old: HashMap<KeyframeId, Sim3Pose>,
        new: HashMap<KeyframeId, Sim3Pose>,
        pair: (KeyframeId, KeyframeId),
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossLogEntry {
    pub keyframe: KeyframeId,
    pub kind: &'static str,
    pub iterations: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub primitives: usize,
}

pub fn format_loss_log(entries: &[LossLogEntry]) -> String {
    let mut out = String::from("# keyframe kind iterations first_loss last_loss primitives\n");
    for e in entries {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            e.keyframe, e.kind, e.iterations, e.first_loss, e.last_loss, e.primitives
        )
        .unwrap();
    }
    out
}

/// Owns the map and applies [`MapEvent`]s.
pub struct Mapper {
    cfg: SlamConfig,
    k: CameraIntrinsics,
    pub map: GaussianMap,
    pub keyframes: Vec<Keyframe>,
    pub log: Vec<LossLogEntry>,
    /// Primitives removed by merging.
    pub merged_away: usize,
    /// Primitive count right before each merge and right after it.
    pub merge_counts: Vec<(usize, usize)>,
    rng: ChaCha8Rng,
}

impl Mapper {
    pub fn new(cfg: &SlamConfig, k: CameraIntrinsics, medium: MediumNetParams) -> Self {
        Self {
            cfg: cfg.clone(),
            k,
            map: GaussianMap::new(medium),
            keyframes: Vec::new(),
            log: Vec::new(),
            merged_away: 0,
            merge_counts: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.map.seed),
        }
    }

    fn record(&mut self, keyframe: KeyframeId, kind: &'static str, r: &StepReport) {
        self.log.push(LossLogEntry {
            keyframe,
            kind,
            iterations: r.iterations,
            first_loss: r.first_loss,
            last_loss: r.last_loss,
            primitives: self.map.len(),
        });
    }

    pub fn handle(&mut self, event: MapEvent) -> Result<(), MapError> {
        match event {
            MapEvent::NewKeyframe(kf) => self.add_keyframe(kf),
            MapEvent::PosesUpdated { old, new, pair } => self.update_poses(&old, &new, pair),
        }
    }

    fn add_keyframe(&mut self, kf: Keyframe) -> Result<(), MapError> {
        let id = kf.id;
        self.keyframes.push(kf);
        if !self.cfg.mapping {
            return Ok(());
        }
        let kf = self.keyframes.last().unwrap();
        let out = render(&self.map.primitives, &self.map.medium, &kf.pose, &self.k)?;
        let fresh = densify(kf, &out, &self.cfg.map, self.cfg.use_water_mask);
        if self.map.is_empty() && !fresh.is_empty() {
            self.map.extent = extent_of(&fresh);
        }
        debug!("keyframe {id}: {} new primitives", fresh.len());
        self.map.add_primitives(fresh);
        let newest = self.keyframes.len() - 1;
        let report = self.map.optimize_step(
            &self.keyframes,
            newest,
            &self.k,
            &self.cfg.map,
            &self.cfg.loss,
            self.cfg.use_water_mask,
            &mut self.rng,
        )?;
        self.record(id, "keyframe", &report);
        Ok(())
    }

    fn update_poses(
        &mut self,
        old: &HashMap<KeyframeId, Sim3Pose>,
        new: &HashMap<KeyframeId, Sim3Pose>,
        pair: (KeyframeId, KeyframeId),
    ) -> Result<(), MapError> {
        let before: Vec<Sim3Pose> = self.keyframes.iter().map(|kf| kf.pose).collect();
        for kf in &mut self.keyframes {
            if let Some(p) = new.get(&kf.id) {
                kf.pose = *p;
            }
        }
        if !self.cfg.mapping {
            return Ok(());
        }
        if self.cfg.adjust {
            let moved = self.map.adjust_primitives(old, new)?;
            debug!("adjusted {moved} primitives");
        }
        let after: Vec<Sim3Pose> = self.keyframes.iter().map(|kf| kf.pose).collect();
        let (flags, global) = mark_rerender(&before, &after, &self.cfg.map);
        for (kf, f) in self.keyframes.iter_mut().zip(&flags) {
            kf.rerender_flag |= f;
        }
        if global {
            let r = self.map.global_mapping(
                &mut self.keyframes,
                &self.k,
                &self.cfg.map,
                &self.cfg.loss,
                self.cfg.use_water_mask,
            )?;
            self.record(pair.0, "global", &r);
        } else {
            for i in 0..self.keyframes.len() {
                if !self.keyframes[i].rerender_flag {
                    continue;
                }
                let mut r = StepReport::default();
                for it in 0..self.cfg.map.refine_iters {
                    let l = self.map.train_step(
                        &self.keyframes[i],
                        &self.k,
                        &self.cfg.loss,
                        &self.cfg.map.learning_rates,
                        self.cfg.use_water_mask,
                    )?;
                    if it == 0 {
                        r.first_loss = l;
                    }
                    r.last_loss = l;
                    r.iterations += 1;
                }
                self.keyframes[i].rerender_flag = false;
                let id = self.keyframes[i].id;
                self.record(id, "rerender", &r);
            }
        }
        if self.cfg.merge {
            let ids: Vec<KeyframeId> = self.keyframes.iter().map(|kf| kf.id).collect();
            let before = self.map.len();
            let removed = self
                .map
                .merge_primitives(pair.0, pair.1, &ids, &self.cfg.map, &mut self.rng)?;
            self.merge_counts.push((before, self.map.len()));
            self.merged_away += removed;
            debug!("merge {}-{}: removed {removed}", pair.0, pair.1);
        }
        Ok(())
    }
}

fn extent_of(prims: &[crate::scene::GaussianPrimitive]) -> f64 {
    let mut lo = nalgebra::Vector3::repeat(f64::INFINITY);
    let mut hi = nalgebra::Vector3::repeat(f64::NEG_INFINITY);
    for p in prims {
        lo = lo.inf(&p.mu);
        hi = hi.sup(&p.mu);
    }
    let d = (hi - lo).norm();
    if d.is_finite() && d > 1e-9 {
        d
    } else {
        1.0
    }
}

/// Tracking, keyframing, loop detection and bundle adjustment.
struct FrontEnd<'a> {
    cfg: &'a SlamConfig,
    k: CameraIntrinsics,
    gt: &'a [Sim3Pose],
    matcher: GroundTruthMatcher,
    /// Frames as the tracker sees them (water zeroed when masking).
    frames: Vec<Frame>,
    keyframes: Vec<Keyframe>,
    edges: Vec<GraphEdge>,
    odometry: Vec<Sim3Pose>,
    frame_poses: Vec<Sim3Pose>,
    loops: Vec<(KeyframeId, KeyframeId)>,
    ba_runs: usize,
}

impl<'a> FrontEnd<'a> {
    fn track(&self, f: usize, last: &Keyframe) -> Result<(TrackResult, Vec<crate::scene::Match>), SlamError> {
        let frame = &self.frames[f];
        let matches = self.matcher.match_frames(last.id as usize, &last.frame, f, frame);
        let result = if self.cfg.gt_poses {
            let rel = last.pose.inverse().compose(&self.gt[f]);
            TrackResult {
                pose: rel,
                inlier_fraction: 1.0,
                mean_residual: 0.0,
                converged: true,
                iterations: 0,
                valid_matches: matches.iter().filter(|m| m.q > 0.0).count(),
                diagnostic: None,
            }
        } else {
            let prev = self.frame_poses.last().copied().unwrap_or(last.pose);
            let init = last.pose.inverse().compose(&prev);
            let r = estimate_pose(
                &matches,
                &last.frame.pointmap,
                &frame.pointmap,
                frame.width(),
                &init,
                &self.cfg.track_kernel,
            )
            .map_err(|source| SlamError::Track { frame: f, source })?;
            if let Some(d) = &r.diagnostic {
                return Err(SlamError::Diverged {
                    frame: f,
                    message: d.clone(),
                });
            }
            if !r.pose.is_valid() || !(1.0 / MAX_SCALE_RATIO..MAX_SCALE_RATIO).contains(&r.pose.scale) {
                return Err(SlamError::Diverged {
                    frame: f,
                    message: format!("implausible pose (scale {})", r.pose.scale),
                });
            }
            r
        };
        Ok((result, matches))
    }

    /// Processes frame `f`, returning the map events it causes.
    fn step(&mut self, f: usize, original: &Frame) -> Result<Vec<MapEvent>, SlamError> {
        let mut events = Vec::new();
        if self.keyframes.is_empty() {
            let pose = self.gt.first().copied().unwrap_or_else(Sim3Pose::identity);
            self.add_keyframe(f, pose, original, &mut events);
            self.frame_poses.push(pose);
            return Ok(events);
        }
        let last = self.keyframes.last().unwrap().clone();
        let (result, matches) = self.track(f, &last)?;
        let world = if self.cfg.gt_poses {
            self.gt[f]
        } else {
            world_pose(&last.pose, &result.pose)
        };
        self.frame_poses.push(world);
        // the sub-pixel filter keeps about (2·tol)² of the matchable pixels
        let mut policy = self.cfg.keyframe;
        policy.min_coverage *= (2.0 * self.cfg.match_subpixel_tol).min(1.0).powi(2);
        if !keyframe_decision(&result, &self.frames[f], &last, &policy) {
            return Ok(events);
        }
        self.edges.push(GraphEdge {
            frame_i: last.id,
            frame_j: f as KeyframeId,
            matches,
            kind: EdgeKind::Sequential,
        });
        self.add_keyframe(f, world, original, &mut events);
        self.close_loops(&mut events)?;
        Ok(events)
    }

    fn add_keyframe(&mut self, f: usize, pose: Sim3Pose, original: &Frame, events: &mut Vec<MapEvent>) {
        let id = f as KeyframeId;
        self.keyframes.push(Keyframe::new(id, self.frames[f].clone(), pose));
        self.odometry.push(pose);
        events.push(MapEvent::NewKeyframe(Keyframe::new(id, original.clone(), pose)));
    }

    fn close_loops(&mut self, events: &mut Vec<MapEvent>) -> Result<(), SlamError> {
        let current = self.keyframes.last().unwrap();
        let loops = match self.cfg.loop_source {
            LoopSource::Geometric => detect_loops(&self.keyframes, current, &self.cfg.loop_detector, &self.matcher),
            LoopSource::GroundTruth => {
                let ids: Vec<KeyframeId> = self.keyframes.iter().map(|kf| kf.id).collect();
                let labels: Vec<_> = ground_truth_loops(
                    &ids,
                    self.gt,
                    self.cfg.loop_detector.radius,
                    self.cfg.loop_detector.min_gap,
                )
                .into_iter()
                .filter(|&(i, _)| i == current.id)
                .collect();
                edges_from_labels(&self.keyframes, &labels, &self.matcher)?
            }
        };
        let Some(best) = loops.iter().max_by_key(|e| e.matches.len()) else {
            return Ok(());
        };
        let pair = (best.frame_i, best.frame_j);
        info!("loop closure {}-{} ({} candidate edges)", pair.0, pair.1, loops.len());
        self.loops.push(pair);
        self.edges.extend(loops);
        if self.cfg.gt_poses {
            return Ok(());
        }
        let ba = global_bundle_adjust(&self.keyframes, &self.edges, &self.k, &self.cfg.ba_kernel)?;
        self.ba_runs += 1;
        if let Some(d) = &ba.diagnostic {
            warn!("bundle adjustment skipped: {d}");
            return Ok(());
        }
        info!(
            "bundle adjustment: cost {:.4e} -> {:.4e} in {} iterations",
            ba.initial_cost, ba.final_cost, ba.iterations
        );
        let old: HashMap<KeyframeId, Sim3Pose> = self.keyframes.iter().map(|kf| (kf.id, kf.pose)).collect();
        for (kf, p) in self.keyframes.iter_mut().zip(&ba.poses) {
            kf.pose = *p;
        }
        let new: HashMap<KeyframeId, Sim3Pose> = self.keyframes.iter().map(|kf| (kf.id, kf.pose)).collect();
        events.push(MapEvent::PosesUpdated { old, new, pair });
        Ok(())
    }
}

#[derive(Debug)]
pub struct SlamOutput {
    pub map: GaussianMap,
    pub keyframe_ids: Vec<KeyframeId>,
    /// Final keyframe poses.
    pub poses: Vec<Sim3Pose>,
    /// Keyframe poses as first tracked, before any bundle adjustment.
    pub odometry_poses: Vec<Sim3Pose>,
    /// World pose of every processed frame as tracked.
    pub frame_poses: Vec<Sim3Pose>,
    pub loops: Vec<(KeyframeId, KeyframeId)>,
    pub ba_runs: usize,
    pub loss_log: Vec<LossLogEntry>,
    pub merged_away: usize,
    pub merge_counts: Vec<(usize, usize)>,
    /// Set when the run stopped early; everything above is the partial state.
    pub failure: Option<SlamError>,
}

impl SlamOutput {
    pub fn trajectory(&self) -> Vec<TrajectoryEntry> {
        self.keyframe_ids
            .iter()
            .zip(&self.poses)
            .map(|(&id, &pose)| TrajectoryEntry {
                timestamp: id as f64,
                pose,
            })
            .collect()
    }

    /// Ground-truth poses of the keyframes.
    pub fn gt_keyframe_poses(&self, gt: &[Sim3Pose]) -> Vec<Sim3Pose> {
        self.keyframe_ids.iter().map(|&id| gt[id as usize]).collect()
    }
}

/// Runs the pipeline over a dataset. Configuration and input problems are
/// returned as errors; failures during the run end it early and are
/// reported in [`SlamOutput::failure`] alongside the partial state.
pub fn run_slam(data: &Dataset, cfg: &SlamConfig) -> Result<SlamOutput, SlamError> {
    cfg.validate().map_err(SlamError::InvalidConfig)?;
    let gt = data.gt_poses.as_deref().ok_or(SlamError::MissingGroundTruth)?;
    let k = data.intrinsics;
    let mut matcher = GroundTruthMatcher::new(gt.to_vec(), k);
    matcher.stride = cfg.match_stride;
    matcher.subpixel_tol = cfg.match_subpixel_tol;
    matcher.occlusion_tol = cfg.match_occlusion_tol;
    let frames = data
        .frames
        .iter()
        .map(|f| if cfg.use_water_mask { mask_confidence(f) } else { f.clone() })
        .collect();
    let mut front = FrontEnd {
        cfg,
        k,
        gt,
        matcher,
        frames,
        keyframes: Vec::new(),
        edges: Vec::new(),
        odometry: Vec::new(),
        frame_poses: Vec::new(),
        loops: Vec::new(),
        ba_runs: 0,
    };
    let mut mapper = Mapper::new(cfg, k, medium_init(cfg.map.seed));

    let mut failure = None;
    if cfg.parallel {
        let (tx, rx) = mpsc::channel::<MapEvent>();
        let (front_failure, mapper_result) = std::thread::scope(|s| {
            let worker = s.spawn(move || -> (Mapper, Option<MapError>) {
                for event in rx {
                    if let Err(e) = mapper.handle(event) {
                        return (mapper, Some(e));
                    }
                }
                (mapper, None)
            });
            let mut front_failure = None;
            'frames: for (f, frame) in data.frames.iter().enumerate() {
                match front.step(f, frame) {
                    Ok(events) => {
                        for e in events {
                            if tx.send(e).is_err() {
                                break 'frames;
                            }
                        }
                    }
                    Err(e) => {
                        front_failure = Some(e);
                        break;
                    }
                }
            }
            drop(tx);
            (front_failure, worker.join().expect("mapper thread panicked"))
        });
        mapper = mapper_result.0;
        failure = mapper_result.1.map(SlamError::from).or(front_failure);
    } else {
        'frames: for (f, frame) in data.frames.iter().enumerate() {
            match front.step(f, frame) {
                Ok(events) => {
                    for e in events {
                        if let Err(e) = mapper.handle(e) {
                            failure = Some(e.into());
                            break 'frames;
                        }
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
    }
    if let Some(e) = &failure {
        warn!("run stopped early: {e}");
    }
    Ok(SlamOutput {
        keyframe_ids: mapper.keyframes.iter().map(|kf| kf.id).collect(),
        poses: mapper.keyframes.iter().map(|kf| kf.pose).collect(),
        map: mapper.map,
        odometry_poses: front.odometry,
        frame_poses: front.frame_poses,
        loops: front.loops,
        ba_runs: front.ba_runs,
        loss_log: mapper.log,
        merged_away: mapper.merged_away,
        merge_counts: mapper.merge_counts,
        failure,
    })
}
