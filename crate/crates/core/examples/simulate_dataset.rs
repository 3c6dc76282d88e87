//! Generates a synthetic underwater sequence and writes it as a dataset
//! directory (images, water masks, pointmaps, confidences, trajectory).
//!
//! cargo run --release --example simulate_dataset -- [out_dir]

use watersplat::harness::{simulate, write_dataset, Layout, SceneSpec, TrajectoryKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sim_dataset".into());
    let spec = SceneSpec {
        layout: Layout::Ridge,
        trajectory: TrajectoryKind::Loop,
        n_frames: 24,
        water_fraction: 0.3,
        pointmap_sigma: 0.01,
        ..SceneSpec::default()
    };
    let (scene, data) = simulate(&spec);
    let poses = data.gt_poses.clone().expect("simulated data has poses");
    write_dataset(std::path::Path::new(&out), &data.intrinsics, &data.frames, &poses, &scene)?;
    let water = data.frames.iter().map(|f| f.water_fraction()).sum::<f64>() / data.frames.len() as f64;
    println!(
        "{} frames of {}x{} with {} primitives; mean water fraction {water:.2}; scene extent {:.2}",
        data.frames.len(),
        data.intrinsics.width,
        data.intrinsics.height,
        scene.primitives.len(),
        scene.extent()
    );
    println!("written to {out}");
    Ok(())
}
