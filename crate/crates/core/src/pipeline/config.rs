//! Line-based `key = value` configuration. `#` starts a comment; unknown
//! keys and unparsable values are errors naming the line.

use std::path::Path;
use std::str::FromStr;

use crate::error::FormatError;
use crate::losses::LossWeights;
use crate::map::MapConfig;
use crate::pose_graph::LoopDetector;
use crate::tracker::{KeyframePolicy, RobustKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopSource {
    /// Distance-based detection on estimated poses.
    Geometric,
    /// Labels from the ground-truth trajectory.
    GroundTruth,
}

impl FromStr for LoopSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(LoopSource::Geometric),
            "ground-truth" => Ok(LoopSource::GroundTruth),
            _ => Err(format!("unknown loop source {s:?} (expected geometric or ground-truth)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlamConfig {
    pub map: MapConfig,
    pub loss: LossWeights,
    /// Tracking kernel, scene units.
    pub track_kernel: RobustKernel,
    /// Bundle-adjustment kernel, pixels.
    pub ba_kernel: RobustKernel,
    pub keyframe: KeyframePolicy,
    pub loop_detector: LoopDetector,
    pub loop_source: LoopSource,
    pub use_water_mask: bool,
    pub adjust: bool,
    pub merge: bool,
    /// Build and optimize the Gaussian map; off runs tracking and BA only.
    pub mapping: bool,
    /// Use ground-truth poses instead of tracking.
    pub gt_poses: bool,
    pub match_stride: usize,
    pub match_subpixel_tol: f64,
    pub match_occlusion_tol: f64,
    pub parallel: bool,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            map: MapConfig::default(),
            loss: LossWeights::default(),
            track_kernel: RobustKernel::default(),
            ba_kernel: RobustKernel { huber_delta: 2.0 },
            keyframe: KeyframePolicy::default(),
            loop_detector: LoopDetector::default(),
            loop_source: LoopSource::Geometric,
            use_water_mask: true,
            adjust: true,
            merge: true,
            mapping: true,
            gt_poses: false,
            match_stride: 1,
            match_subpixel_tol: 0.25,
            match_occlusion_tol: 0.1,
            parallel: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
}

impl SlamConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.map.is_valid() {
            return Err("map parameters out of range".into());
        }
        if !self.loss.is_valid() {
            return Err("loss weights out of range".into());
        }
        if !(self.track_kernel.huber_delta > 0.0 && self.ba_kernel.huber_delta > 0.0) {
            return Err("Huber thresholds must be positive".into());
        }
        if self.match_stride == 0 || !(self.match_subpixel_tol > 0.0) || !(self.match_occlusion_tol > 0.0) {
            return Err("matcher parameters must be positive".into());
        }
        Ok(())
    }

    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let lr = &mut self.map.learning_rates;
        match key {
            "tau_a" => self.map.tau_a = parse(key, value)?,
            "d_thresh" => self.map.d_thresh = parse(key, value)?,
            "theta_thresh" => self.map.theta_thresh = parse(key, value)?,
            "global_thresh" => self.map.global_thresh = parse(key, value)?,
            "voxel_size" => self.map.voxel_size = parse(key, value)?,
            "new_kf_iters" => self.map.new_kf_iters = parse(key, value)?,
            "refine_kf_count" => self.map.refine_kf_count = parse(key, value)?,
            "refine_iters" => self.map.refine_iters = parse(key, value)?,
            "densify_downsample" => self.map.densify_downsample = parse(key, value)?,
            "init_scale_factor" => self.map.init_scale_factor = parse(key, value)?,
            "seed" => self.map.seed = parse(key, value)?,
            "lr_position" => lr.position = parse(key, value)?,
            "lr_rotation" => lr.rotation = parse(key, value)?,
            "lr_log_scale" => lr.log_scale = parse(key, value)?,
            "lr_color" => lr.color = parse(key, value)?,
            "lr_opacity" => lr.opacity = parse(key, value)?,
            "lr_medium" => lr.medium = parse(key, value)?,
            "lambda_ssim" => self.loss.lambda_ssim = parse(key, value)?,
            "lambda_sempho" => self.loss.lambda_sempho = parse(key, value)?,
            "lambda_s" => self.loss.lambda_s = parse(key, value)?,
            "huber_delta" => self.track_kernel.huber_delta = parse(key, value)?,
            "ba_huber_delta" => self.ba_kernel.huber_delta = parse(key, value)?,
            "kf_min_coverage" => self.keyframe.min_coverage = parse(key, value)?,
            "kf_translation_factor" => self.keyframe.translation_factor = parse(key, value)?,
            "kf_rotation_deg" => self.keyframe.rotation_deg = parse(key, value)?,
            "loop_radius" => self.loop_detector.radius = parse(key, value)?,
            "loop_min_gap" => self.loop_detector.min_gap = parse(key, value)?,
            "loop_source" => self.loop_source = value.parse()?,
            "use_water_mask" => self.use_water_mask = parse(key, value)?,
            "adjust" => self.adjust = parse(key, value)?,
            "merge" => self.merge = parse(key, value)?,
            "mapping" => self.mapping = parse(key, value)?,
            "gt_poses" => self.gt_poses = parse(key, value)?,
            "match_stride" => self.match_stride = parse(key, value)?,
            "match_subpixel_tol" => self.match_subpixel_tol = parse(key, value)?,
            "match_occlusion_tol" => self.match_occlusion_tol = parse(key, value)?,
            "parallel" => self.parallel = parse(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<(), FormatError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FormatError::bad_line(path, i + 1, "expected `key = value`"))?;
            self.set(key.trim(), value.trim())
                .map_err(|m| FormatError::bad_line(path, i + 1, m))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }
}
