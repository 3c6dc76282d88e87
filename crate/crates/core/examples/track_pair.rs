//! Two-view Sim(3) tracking from pointmap correspondences, with and without
//! the water mask.
//!
//! cargo run --release --example track_pair

use watersplat::harness::{simulate, GroundTruthMatcher, SceneSpec};
use watersplat::scene::{pose_delta_metrics, Sim3Pose};
use watersplat::tracker::{estimate_pose, mask_confidence, RobustKernel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        n_frames: 6,
        water_fraction: 0.4,
        outlier_fraction: 0.1,
        ..SceneSpec::default()
    };
    let (_, data) = simulate(&spec);
    let gt = data.gt_poses.clone().expect("simulated data has poses");
    let k = data.intrinsics;
    let matcher = GroundTruthMatcher::new(gt.clone(), k);
    let truth = gt[0].inverse().compose(&gt[2]);
    println!("true baseline {:.4}", truth.translation.norm());
    for masked in [true, false] {
        let prep = |i: usize| if masked { mask_confidence(&data.frames[i]) } else { data.frames[i].clone() };
        let (a, b) = (prep(0), prep(2));
        let matches = matcher.match_frames(0, &a, 2, &b);
        let r = estimate_pose(&matches, &a.pointmap, &b.pointmap, k.width, &Sim3Pose::identity(), &RobustKernel::default())?;
        let (d, theta) = pose_delta_metrics(&truth, &r.pose);
        println!(
            "water mask {masked:<5}: {} matches ({} weighted), translation error {d:.4}, rotation error {theta:.3} deg, scale {:.4}",
            matches.len(),
            r.valid_matches,
            r.pose.scale
        );
    }
    Ok(())
}
