//! Dataset directory layout:
//!
//! ```text
//! intrinsics.txt        fx fy cx cy width height
//! images/%06d.ppm       8-bit RGB
//! masks/%06d.pgm        0 = object, 255 = water
//! pointmaps/%06d.pfm    3-channel float32
//! conf/%06d.pfm         1-channel float32
//! gt_traj.txt           trajectory text (optional)
//! medium_gt.txt         σ_attn σ_bs c_med, 9 floats (optional)
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use super::{GroundTruthMedium, GroundTruthScene};
use crate::error::FormatError;
use crate::formats::{read_pfm, read_pgm_mask, read_ppm, write_pfm, write_pgm_mask, write_ppm, FloatMap};
use crate::medium::MediumSample;
use crate::scene::trajectory::{read_trajectory, write_trajectory, TrajectoryEntry};
use crate::scene::{CameraIntrinsics, Frame, Sim3Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    /// Ground-truth poses, one per frame, when `gt_traj.txt` exists.
    pub gt_poses: Option<Vec<Sim3Pose>>,
    pub medium_gt: Option<MediumSample>,
}

fn frame_path(dir: &Path, sub: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{i:06}.{ext}"))
}

fn create_dir(path: &Path) -> Result<(), FormatError> {
    std::fs::create_dir_all(path).map_err(|e| FormatError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    std::fs::write(path, text).map_err(|e| FormatError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, FormatError> {
    std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))
}

fn parse_numbers(text: &str, count: usize, path: &Path) -> Result<Vec<f64>, FormatError> {
    let values = text
        .split_whitespace()
        .enumerate()
        .map(|(i, t)| {
            t.parse::<f64>()
                .map_err(|_| FormatError::bad_line(path, 1, format!("field {} is not a number: {t:?}", i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != count {
        return Err(FormatError::bad_line(
            path,
            1,
            format!("expected {count} numbers, found {}", values.len()),
        ));
    }
    Ok(values)
}

pub fn write_dataset(
    dir: &Path,
    k: &CameraIntrinsics,
    frames: &[Frame],
    poses: &[Sim3Pose],
    scene: &GroundTruthScene,
) -> Result<(), FormatError> {
    for sub in ["images", "masks", "pointmaps", "conf"] {
        create_dir(&dir.join(sub))?;
    }
    write_text(
        &dir.join("intrinsics.txt"),
        &format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )?;
    for (i, f) in frames.iter().enumerate() {
        let (w, h) = (f.width(), f.height());
        write_ppm(&frame_path(dir, "images", i, "ppm"), &f.image)?;
        write_pgm_mask(&frame_path(dir, "masks", i, "pgm"), &f.water_mask, w, h)?;
        let pm = FloatMap {
            width: w,
            height: h,
            channels: 3,
            data: f.pointmap.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        };
        write_pfm(&frame_path(dir, "pointmaps", i, "pfm"), &pm)?;
        let conf = FloatMap {
            width: w,
            height: h,
            channels: 1,
            data: f.confidence.iter().map(|&c| c as f32).collect(),
        };
        write_pfm(&frame_path(dir, "conf", i, "pfm"), &conf)?;
    }
    let traj: Vec<TrajectoryEntry> = poses
        .iter()
        .enumerate()
        .map(|(i, p)| TrajectoryEntry {
            timestamp: i as f64,
            pose: *p,
        })
        .collect();
    write_trajectory(&dir.join("gt_traj.txt"), &traj)?;
    if let GroundTruthMedium::Constant(m) = &scene.medium {
        let v = m.to_array();
        let line = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        write_text(&dir.join("medium_gt.txt"), &format!("{line}\n"))?;
    }
    Ok(())
}

fn check_shape(path: &Path, w: usize, h: usize, k: &CameraIntrinsics) -> Result<(), FormatError> {
    if (w, h) != (k.width, k.height) {
        return Err(FormatError::malformed(
            path,
            0,
            format!("size {w}x{h} does not match intrinsics {}x{}", k.width, k.height),
        ));
    }
    Ok(())
}

fn read_frame(dir: &Path, i: usize, k: &CameraIntrinsics) -> Result<Frame, FormatError> {
    let img_path = frame_path(dir, "images", i, "ppm");
    let image = read_ppm(&img_path)?;
    check_shape(&img_path, image.width, image.height, k)?;
    let mask_path = frame_path(dir, "masks", i, "pgm");
    let (water_mask, w, h) = read_pgm_mask(&mask_path)?;
    check_shape(&mask_path, w, h, k)?;
    let pm_path = frame_path(dir, "pointmaps", i, "pfm");
    let pm = read_pfm(&pm_path)?;
    check_shape(&pm_path, pm.width, pm.height, k)?;
    if pm.channels != 3 {
        return Err(FormatError::malformed(&pm_path, 0, "pointmap must have 3 channels"));
    }
    let conf_path = frame_path(dir, "conf", i, "pfm");
    let conf = read_pfm(&conf_path)?;
    check_shape(&conf_path, conf.width, conf.height, k)?;
    if conf.channels != 1 {
        return Err(FormatError::malformed(&conf_path, 0, "confidence map must have 1 channel"));
    }
    Ok(Frame {
        image,
        water_mask,
        pointmap: pm
            .data
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect(),
        confidence: conf.data.iter().map(|&c| c as f64).collect(),
        timestamp: i as f64,
    })
}

/// Reads every frame `000000, 000001, …` until the first missing image.
pub fn read_dataset(dir: &Path) -> Result<Dataset, FormatError> {
    let k_path = dir.join("intrinsics.txt");
    let v = parse_numbers(&read_text(&k_path)?, 6, &k_path)?;
    let dims_ok = v[4] >= 1.0 && v[5] >= 1.0 && v[4].fract() == 0.0 && v[5].fract() == 0.0;
    let k = CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize);
    if !dims_ok || !k.is_valid() {
        return Err(FormatError::bad_line(&k_path, 1, "invalid intrinsics"));
    }
    let mut frames = Vec::new();
    while frame_path(dir, "images", frames.len(), "ppm").exists() {
        frames.push(read_frame(dir, frames.len(), &k)?);
    }
    if frames.is_empty() {
        return Err(FormatError::malformed(frame_path(dir, "images", 0, "ppm"), 0, "dataset has no frames"));
    }
    let traj_path = dir.join("gt_traj.txt");
    let gt_poses = if traj_path.exists() {
        let traj = read_trajectory(&traj_path)?;
        if traj.len() != frames.len() {
            return Err(FormatError::bad_line(
                &traj_path,
                traj.len(),
                format!("{} poses for {} frames", traj.len(), frames.len()),
            ));
        }
        Some(traj.into_iter().map(|e| e.pose).collect())
    } else {
        None
    };
    let med_path = dir.join("medium_gt.txt");
    let medium_gt = if med_path.exists() {
        let v = parse_numbers(&read_text(&med_path)?, 9, &med_path)?;
        Some(MediumSample::from_array(&v.try_into().unwrap()))
    } else {
        None
    };
    Ok(Dataset {
        intrinsics: k,
        frames,
        gt_poses,
        medium_gt,
    })
}
