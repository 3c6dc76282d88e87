//! Tracking-only run over a closed loop: keyframing, loop detection and
//! global bundle adjustment, reported as ATE before and after.
//!
//! cargo run --release --example loop_closure

use watersplat::harness::{generate_scene, simulate, SceneSpec, TrajectoryKind};
use watersplat::metrics::ate_rmse_poses;
use watersplat::pipeline::{run_slam, SlamConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = SceneSpec {
        trajectory: TrajectoryKind::Loop,
        n_frames: 40,
        ..SceneSpec::default()
    };
    spec.pointmap_sigma = 0.005 * generate_scene(&spec).extent();
    let (_, data) = simulate(&spec);
    let cfg = SlamConfig {
        mapping: false,
        ..SlamConfig::default()
    };
    let out = run_slam(&data, &cfg)?;
    if let Some(e) = &out.failure {
        return Err(format!("run stopped early: {e}").into());
    }
    let gt = out.gt_keyframe_poses(data.gt_poses.as_ref().expect("simulated data has poses"));
    println!("{} keyframes, loops {:?}, {} bundle adjustments", out.keyframe_ids.len(), out.loops, out.ba_runs);
    println!("keyframe ATE before BA {:.4}", ate_rmse_poses(&out.odometry_poses, &gt)?);
    println!("keyframe ATE after BA  {:.4}", ate_rmse_poses(&out.poses, &gt)?);
    Ok(())
}
