//! Builds a medium-aware Gaussian map from ground-truth poses and scores
//! held-out views. Uses a reduced schedule so it finishes in about a minute.
//!
//! cargo run --release --example map_scene

use watersplat::harness::{simulate, Dataset, SceneSpec};
use watersplat::medium::medium_forward;
use watersplat::metrics::psnr;
use watersplat::pipeline::{format_loss_log, run_slam, SlamConfig};
use watersplat::render::render;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        width: 48,
        height: 48,
        n_frames: 13,
        ..SceneSpec::default()
    };
    let (_, data) = simulate(&spec);
    let gt = data.gt_poses.clone().expect("simulated data has poses");
    // even frames train, odd frames are held out
    let train = Dataset {
        frames: data.frames.iter().step_by(2).cloned().collect(),
        gt_poses: Some(gt.iter().step_by(2).copied().collect()),
        ..data.clone()
    };
    let mut cfg = SlamConfig {
        gt_poses: true,
        ..SlamConfig::default()
    };
    cfg.keyframe.min_coverage = f64::INFINITY;
    cfg.map.new_kf_iters = 30;
    let out = run_slam(&train, &cfg)?;
    print!("{}", format_loss_log(&out.loss_log));
    println!("{} primitives over {} keyframes", out.map.len(), out.keyframe_ids.len());
    for i in (1..data.frames.len()).step_by(2) {
        let r = render(&out.map.primitives, &out.map.medium, &gt[i], &data.intrinsics)?;
        println!("held-out frame {i:>2}: PSNR {:.2} dB", psnr(&r.composite.quantized(), &data.frames[i].image)?);
    }
    let m = medium_forward(&out.map.medium, &(gt[0].rotation * nalgebra::Vector3::z()));
    println!("medium along the first view axis: {m:?}");
    if let Some(truth) = data.medium_gt {
        println!("ground-truth medium:              {truth:?}");
    }
    Ok(())
}
