//! Adaptive-moment updates of primitives and the medium network, and the
//! keyframe training schedule built on them.

use rand::seq::index::sample;
use rand::Rng;

use super::{GaussianMap, MapConfig};
use crate::error::MapError;
use crate::losses::{total_loss, total_loss_backward, LossWeights};
use crate::render::{render_taped, RenderGradients};
use crate::scene::{CameraIntrinsics, Keyframe, KeyframeId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    /// Multiplied by the map extent.
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub color: f64,
    pub opacity: f64,
    pub medium: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            color: 2.5e-3,
            opacity: 5e-2,
            medium: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn is_valid(&self) -> bool {
        [self.position, self.rotation, self.log_scale, self.color, self.opacity, self.medium]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }

    fn per_attribute(&self, extent: f64) -> [f64; 14] {
        let mut lr = [0.0; 14];
        lr[0..3].fill(self.position * extent);
        lr[3..7].fill(self.rotation);
        lr[7..10].fill(self.log_scale);
        lr[10..13].fill(self.color);
        lr[13] = self.opacity;
        lr
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Slot {
    m: [f64; 14],
    v: [f64; 14],
    t: u32,
}

/// Moment estimates. Primitives keep their own step counters and are only
/// stepped when they receive a gradient, so newly added or invisible ones
/// are not dragged along by stale momentum.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    slots: Vec<Slot>,
    medium_m: Vec<f64>,
    medium_v: Vec<f64>,
    medium_t: u32,
}

impl Adam {
    pub(super) fn grow(&mut self, n: usize) {
        self.slots.extend(std::iter::repeat_n(Slot::default(), n));
    }

    pub(super) fn reset(&mut self, i: usize) {
        self.slots[i] = Slot::default();
    }

    pub(super) fn retain(&mut self, remove: &[bool]) {
        let mut it = remove.iter();
        self.slots.retain(|_| !*it.next().unwrap());
    }

    fn step(m: &mut f64, v: &mut f64, t: u32, g: f64, lr: f64) -> f64 {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let mh = *m / (1.0 - BETA1.powi(t as i32));
        let vh = *v / (1.0 - BETA2.powi(t as i32));
        lr * mh / (vh.sqrt() + EPS)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub iterations: usize,
    /// Loss at the first and last iteration (each measured before its update).
    pub first_loss: f64,
    pub last_loss: f64,
    pub refined: Vec<KeyframeId>,
}

impl StepReport {
    fn record(&mut self, loss: f64) {
        if self.iterations == 0 {
            self.first_loss = loss;
        }
        self.last_loss = loss;
        self.iterations += 1;
    }
}

impl GaussianMap {
    /// Applies one adaptive-moment update from `grads`.
    pub fn apply_gradients(&mut self, grads: &RenderGradients, lr: &LearningRates) {
        debug_assert_eq!(grads.primitives.len(), self.primitives.len());
        if self.adam.slots.len() != self.primitives.len() {
            self.adam.slots.resize(self.primitives.len(), Slot::default());
        }
        let rates = lr.per_attribute(self.extent);
        for ((p, g), slot) in self.primitives.iter_mut().zip(&grads.primitives).zip(&mut self.adam.slots) {
            if g.is_zero() {
                continue;
            }
            slot.t += 1;
            let ga = g.to_array();
            let mut d = [0.0; 14];
            for k in 0..14 {
                d[k] = Adam::step(&mut slot.m[k], &mut slot.v[k], slot.t, ga[k], rates[k]);
            }
            for c in 0..3 {
                p.mu[c] -= d[c];
                p.log_scale[c] -= d[7 + c];
                p.color[c] = (p.color[c] - d[10 + c]).clamp(0.0, 1.0);
            }
            for c in 0..4 {
                p.rot.coords[c] -= d[3 + c];
            }
            let n = p.rot.norm();
            if n > 0.0 {
                p.rot /= n;
            }
            p.opacity_logit -= d[13];
        }

        let n = grads.medium.as_slice().len();
        if self.adam.medium_m.len() != n {
            self.adam.medium_m = vec![0.0; n];
            self.adam.medium_v = vec![0.0; n];
            self.adam.medium_t = 0;
        }
        self.adam.medium_t += 1;
        let t = self.adam.medium_t;
        let params = self.medium.as_mut_slice();
        for (i, g) in grads.medium.as_slice().iter().enumerate() {
            params[i] -= Adam::step(&mut self.adam.medium_m[i], &mut self.adam.medium_v[i], t, *g, lr.medium);
        }
    }

    /// One gradient step of the total loss against a keyframe. Returns the
    /// loss before the update.
    pub fn train_step(
        &mut self,
        kf: &Keyframe,
        k: &CameraIntrinsics,
        weights: &LossWeights,
        lr: &LearningRates,
        use_water_mask: bool,
    ) -> Result<f64, MapError> {
        let (out, tape) = render_taped(&self.primitives, &self.medium, &kf.pose, k)?;
        let no_water;
        let mask: &[bool] = if use_water_mask {
            &kf.frame.water_mask
        } else {
            no_water = vec![false; kf.frame.pixel_count()];
            &no_water
        };
        let loss = total_loss(&out, &kf.frame.image, mask, &self.primitives, weights)?;
        let grads = total_loss_backward(&loss, &self.primitives, &self.medium, k, &tape);
        self.apply_gradients(&grads, lr);
        Ok(loss.value)
    }

    /// The per-keyframe schedule: `new_kf_iters` steps on `keyframes[newest]`,
    /// then `refine_iters` steps on each of up to `refine_kf_count` other
    /// keyframes drawn without replacement.
    #[allow(clippy::too_many_arguments)]
    pub fn optimize_step<R: Rng>(
        &mut self,
        keyframes: &[Keyframe],
        newest: usize,
        k: &CameraIntrinsics,
        cfg: &MapConfig,
        weights: &LossWeights,
        use_water_mask: bool,
        rng: &mut R,
    ) -> Result<StepReport, MapError> {
        let mut report = StepReport::default();
        let lr = &cfg.learning_rates;
        for _ in 0..cfg.new_kf_iters {
            let l = self.train_step(&keyframes[newest], k, weights, lr, use_water_mask)?;
            report.record(l);
        }
        let others: Vec<usize> = (0..keyframes.len()).filter(|&i| i != newest).collect();
        let count = cfg.refine_kf_count.min(others.len());
        for j in sample(rng, others.len(), count).into_iter() {
            let kf = &keyframes[others[j]];
            report.refined.push(kf.id);
            for _ in 0..cfg.refine_iters {
                let l = self.train_step(kf, k, weights, lr, use_water_mask)?;
                report.record(l);
            }
        }
        Ok(report)
    }

    /// Re-renders every keyframe for `refine_iters` steps, then clears all
    /// re-render flags.
    pub fn global_mapping(
        &mut self,
        keyframes: &mut [Keyframe],
        k: &CameraIntrinsics,
        cfg: &MapConfig,
        weights: &LossWeights,
        use_water_mask: bool,
    ) -> Result<StepReport, MapError> {
        let mut report = StepReport::default();
        for kf in keyframes.iter() {
            report.refined.push(kf.id);
            for _ in 0..cfg.refine_iters {
                let l = self.train_step(kf, k, weights, &cfg.learning_rates, use_water_mask)?;
                report.record(l);
            }
        }
        keyframes.iter_mut().for_each(|kf| kf.rerender_flag = false);
        Ok(report)
    }
}
