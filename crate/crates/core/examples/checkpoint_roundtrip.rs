//! Saves a map with its keyframe trajectory to a checkpoint, reads it back
//! and confirms the rendering is unchanged at checkpoint precision.
//!
//! cargo run --release --example checkpoint_roundtrip

use watersplat::harness::{generate_scene, generate_trajectory, SceneSpec};
use watersplat::map::{read_checkpoint, write_checkpoint, GaussianMap};
use watersplat::render::render;
use watersplat::scene::trajectory::TrajectoryEntry;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default();
    let scene = generate_scene(&spec);
    let poses = generate_trajectory(&spec);
    let map = GaussianMap::with_primitives(scene.primitives.clone(), scene.medium.params());
    let trajectory: Vec<TrajectoryEntry> = poses
        .iter()
        .enumerate()
        .map(|(i, &pose)| TrajectoryEntry { timestamp: i as f64, pose })
        .collect();
    let dir = std::env::temp_dir().join("watersplat_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("map.wspl");
    write_checkpoint(&path, &map, &trajectory)?;
    let back = read_checkpoint(&path)?;
    let k = spec.intrinsics();
    let a = render(&map.primitives, &map.medium, &poses[3], &k)?;
    let b = render(&back.map.primitives, &back.map.medium, &back.trajectory[3].pose, &k)?;
    println!(
        "{} bytes, {} primitives, {} poses; max composite difference after reload {:.2e}",
        std::fs::metadata(&path)?.len(),
        back.map.len(),
        back.trajectory.len(),
        a.composite.max_abs_diff(&b.composite)
    );
    Ok(())
}
