//! Command-line entry points: `watersplat <simulate|slam|eval|render>`.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use nalgebra::Vector3;

use crate::error::{FormatError, SlamError};
use crate::formats::write_ppm;
use crate::harness::{read_dataset, simulate, write_dataset, Layout, SceneSpec, TrajectoryKind};
use crate::losses::ssim;
use crate::map::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::medium::medium_forward;
use crate::metrics::{ate_rmse_poses, psnr, umeyama, MetricsTable};
use crate::pipeline::{format_loss_log, run_slam, SlamConfig};
use crate::render::{render, RenderMode};
use crate::scene::trajectory::{write_trajectory, TrajectoryEntry};
use crate::scene::{quat_from_xyzw, CameraIntrinsics, Sim3Pose};

#[derive(Debug, Parser)]
#[command(name = "watersplat", version, about = "Medium-aware Gaussian splatting SLAM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset.
    Simulate(SimulateArgs),
    /// Run SLAM on a dataset.
    Slam(SlamArgs),
    /// Evaluate a checkpoint on held-out views.
    Eval(EvalArgs),
    /// Render one view of a checkpoint.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// plane | box-room | ridge. A trajectory name (orbit | lawnmower | loop)
    /// is accepted as shorthand for `--trajectory` over the plane layout.
    #[arg(long, default_value = "plane")]
    pub layout: String,
    /// orbit | lawnmower | loop
    #[arg(long)]
    pub trajectory: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub frames: usize,
    #[arg(long, default_value_t = 200)]
    pub primitives: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Horizontal field of view, degrees.
    #[arg(long, default_value_t = 60.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 0.3)]
    pub water_fraction: f64,
    /// Pointmap noise standard deviation, scene units.
    #[arg(long, default_value_t = 0.0)]
    pub pointmap_sigma: f64,
    /// Pointmap noise as a fraction of the scene extent; overrides
    /// `--pointmap-sigma`.
    #[arg(long)]
    pub pointmap_sigma_rel: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub confidence_floor: f64,
    #[arg(long, default_value_t = 0.0)]
    pub outlier_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SlamArgs {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_water_mask: bool,
    #[arg(long)]
    pub no_adjust: bool,
    #[arg(long)]
    pub no_merge: bool,
    /// Run the mapper on its own thread.
    #[arg(long)]
    pub parallel: bool,
    /// Use ground-truth poses instead of tracking.
    #[arg(long)]
    pub gt_poses: bool,
    /// Track and bundle-adjust only; build no map.
    #[arg(long)]
    pub no_mapping: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated frame indices; defaults to every non-keyframe.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every held-out render in all four modes.
    #[arg(long)]
    pub save_renders: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Camera pose `tx ty tz qx qy qz qw [s]`, world from camera.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "frame")]
    pub pose: Option<String>,
    /// Use the checkpoint pose of this keyframe.
    #[arg(long)]
    pub frame: Option<u32>,
    /// Intrinsics `fx fy cx cy width height`.
    #[arg(long, conflicts_with = "dataset")]
    pub intrinsics: Option<String>,
    /// Read intrinsics from a dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// composite | object | medium | clear
    #[arg(long, default_value = "composite")]
    pub mode: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SlamError> for CliError {
    fn from(e: SlamError) -> Self {
        match e {
            SlamError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

/// Parses arguments (including the program name) and runs the command.
/// Returns the process exit code; messages go to stdout/stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a command and returns its printed summary.
pub fn run(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Slam(a) => cmd_slam(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn scene_spec(a: &SimulateArgs) -> Result<SceneSpec, CliError> {
    let (layout, mut trajectory) = match a.layout.parse::<Layout>() {
        Ok(l) => (l, TrajectoryKind::Orbit),
        Err(e) => match a.layout.parse::<TrajectoryKind>() {
            Ok(t) => (Layout::Plane, t),
            Err(_) => {
                return Err(CliError::Usage(format!(
                    "{e}: layout must be plane, box-room or ridge"
                )))
            }
        },
    };
    if let Some(t) = &a.trajectory {
        trajectory = t
            .parse()
            .map_err(|e| CliError::Usage(format!("{e}: trajectory must be orbit, lawnmower or loop")))?;
    }
    let spec = SceneSpec {
        n_primitives: a.primitives,
        layout,
        water_fraction: a.water_fraction,
        seed: a.seed,
        width: a.width,
        height: a.height,
        fov_deg: a.fov,
        trajectory,
        n_frames: a.frames,
        pointmap_sigma: a.pointmap_sigma,
        confidence_floor: a.confidence_floor,
        outlier_fraction: a.outlier_fraction,
    };
    if !spec.is_valid() {
        return Err(CliError::Usage("scene parameters out of range".into()));
    }
    Ok(spec)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let mut spec = scene_spec(a)?;
    if let Some(rel) = a.pointmap_sigma_rel {
        if !(rel >= 0.0) {
            return Err(CliError::Usage("--pointmap-sigma-rel must be non-negative".into()));
        }
        spec.pointmap_sigma = rel * crate::harness::generate_scene(&spec).extent();
    }
    let (scene, data) = simulate(&spec);
    let poses = data.gt_poses.as_ref().expect("simulated data has poses");
    write_dataset(&a.out, &data.intrinsics, &data.frames, poses, &scene)?;
    let water = data.frames.iter().map(|f| f.water_fraction()).sum::<f64>() / data.frames.len() as f64;
    Ok(format!(
        "frames: {}\nprimitives: {}\nrealized water fraction: {water:.4}\n",
        data.frames.len(),
        scene.primitives.len()
    ))
}

pub fn slam_config(a: &SlamArgs) -> Result<SlamConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => SlamConfig::from_file(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => SlamConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Usage)?;
    }
    cfg.use_water_mask &= !a.no_water_mask;
    cfg.adjust &= !a.no_adjust;
    cfg.merge &= !a.no_merge;
    cfg.parallel |= a.parallel;
    cfg.gt_poses |= a.gt_poses;
    cfg.mapping &= !a.no_mapping;
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

pub fn cmd_slam(a: &SlamArgs) -> Result<String, CliError> {
    let cfg = slam_config(a)?;
    let data = read_dataset(&a.dataset)?;
    let out = run_slam(&data, &cfg)?;
    create_dir(&a.out)?;
    let traj = out.trajectory();
    write_checkpoint(&a.out.join("map.wspl"), &out.map, &traj)?;
    write_trajectory(&a.out.join("trajectory.txt"), &traj)?;
    let frames: Vec<TrajectoryEntry> = out
        .frame_poses
        .iter()
        .enumerate()
        .map(|(i, &pose)| TrajectoryEntry {
            timestamp: i as f64,
            pose,
        })
        .collect();
    write_trajectory(&a.out.join("frames.txt"), &frames)?;
    write_text(&a.out.join("loss_log.txt"), &format_loss_log(&out.loss_log))?;

    let mut summary = format!(
        "frames tracked: {}\nkeyframes: {}\nprimitives: {}\nloop closures: {}\nbundle adjustments: {}\nmerged away: {}\n",
        out.frame_poses.len(),
        out.keyframe_ids.len(),
        out.map.len(),
        out.loops.len(),
        out.ba_runs,
        out.merged_away
    );
    if let Some(gt) = &data.gt_poses {
        if out.poses.len() >= 3 {
            let gk = out.gt_keyframe_poses(gt);
            match ate_rmse_poses(&out.poses, &gk) {
                Ok(ate) => summary.push_str(&format!("keyframe ATE: {ate:.6}\n")),
                Err(e) => warn!("ATE unavailable: {e}"),
            }
        }
    }
    write_text(&a.out.join("summary.txt"), &summary)?;
    if let Some(e) = out.failure {
        // partial outputs are already on disk
        return Err(e.into());
    }
    Ok(summary)
}

/// Sim(3) taking checkpoint (map) coordinates to dataset coordinates,
/// estimated from keyframe positions; identity when they already agree.
fn map_to_world(ck: &Checkpoint, gt: &[Sim3Pose]) -> Sim3Pose {
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = ck
        .trajectory
        .iter()
        .filter_map(|e| {
            let i = e.timestamp.round() as usize;
            gt.get(i).map(|g| (e.pose.translation, g.translation))
        })
        .collect();
    let exact = pairs.iter().all(|(a, b)| (a - b).norm() <= 1e-9);
    if exact || pairs.len() < 3 {
        return Sim3Pose::identity();
    }
    let (src, dst): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    umeyama(&src, &dst).unwrap_or_else(|e| {
        warn!("trajectory alignment failed ({e}); using identity");
        Sim3Pose::identity()
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String, CliError> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let data = read_dataset(&a.dataset)?;
    let gt = data
        .gt_poses
        .as_ref()
        .ok_or_else(|| CliError::Data(format!("{}: missing gt_traj.txt", a.dataset.display())))?;
    let keyframes: Vec<usize> = ck.trajectory.iter().map(|e| e.timestamp.round() as usize).collect();
    let holdout = match &a.holdout {
        Some(h) => h.clone(),
        None => (0..data.frames.len()).filter(|i| !keyframes.contains(i)).collect(),
    };
    if let Some(&bad) = holdout.iter().find(|&&i| i >= data.frames.len()) {
        return Err(CliError::Usage(format!(
            "holdout frame {bad} out of range (dataset has {} frames)",
            data.frames.len()
        )));
    }
    create_dir(&a.out)?;
    let align = map_to_world(&ck, gt);
    let to_map = align.inverse();
    let k = data.intrinsics;
    let mut table = MetricsTable::new(["psnr", "ssim"]);
    let mut dirs = Vec::new();
    for &i in &holdout {
        let pose = to_map.compose(&gt[i]);
        let out = render(&ck.map.primitives, &ck.map.medium, &pose, &k)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        let target = &data.frames[i].image;
        let rendered = out.composite.quantized();
        let p = psnr(&rendered, target).map_err(|e| CliError::Data(e.to_string()))?;
        let s = ssim(&rendered, target).map_err(|e| CliError::Data(e.to_string()))?.value;
        table.push(format!("{i}"), vec![p, s]);
        if a.save_renders {
            for mode in RenderMode::ALL {
                write_ppm(&a.out.join(format!("{i:06}_{}.ppm", mode.name())), out.mode(mode))?;
            }
        }
        let r = pose.rotation;
        dirs.extend((0..k.height).flat_map(|y| (0..k.width).map(move |x| (x, y))).map(|(x, y)| r * k.ray(x as f64, y as f64).normalize()));
    }
    table.push_mean();
    write_text(&a.out.join("metrics.csv"), &table.to_csv())?;

    let mut text = table.to_text();
    let est: Vec<Sim3Pose> = ck.trajectory.iter().map(|e| e.pose).collect();
    let gk: Vec<Sim3Pose> = keyframes.iter().filter_map(|&i| gt.get(i).copied()).collect();
    match ate_rmse_poses(&est, &gk) {
        Ok(ate) => text.push_str(&format!("\nkeyframe ATE: {ate:.6}\n")),
        Err(e) => text.push_str(&format!("\nkeyframe ATE: unavailable ({e})\n")),
    }
    if let (Some(m), false) = (&data.medium_gt, dirs.is_empty()) {
        let mut mean = [0.0; 9];
        for d in &dirs {
            for (acc, v) in mean.iter_mut().zip(medium_forward(&ck.map.medium, d).to_array()) {
                *acc += v / dirs.len() as f64;
            }
        }
        text.push_str("\nmedium        ground_truth     recovered   rel_error\n");
        let names = ["sigma_attn", "sigma_bs", "c_med"];
        for (j, (g, e)) in m.to_array().iter().zip(mean).enumerate() {
            text.push_str(&format!(
                "{:<10}.{} {g:>14.6} {e:>13.6} {:>11.4}\n",
                names[j / 3],
                ["r", "g", "b"][j % 3],
                (e - g).abs() / g.abs().max(1e-12)
            ));
        }
    }
    write_text(&a.out.join("metrics.txt"), &text)?;
    info!("evaluated {} held-out views", holdout.len());
    Ok(text)
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split([' ', ','])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| CliError::Usage(format!("bad number {t:?} in {what}"))))
        .collect()
}

pub fn cmd_render(a: &RenderArgs) -> Result<String, CliError> {
    let mode: RenderMode = a.mode.parse().map_err(CliError::Usage)?;
    let k = match (&a.intrinsics, &a.dataset) {
        (Some(s), _) => {
            let v = parse_floats(s, "--intrinsics")?;
            if v.len() != 6 {
                return Err(CliError::Usage("--intrinsics needs fx fy cx cy width height".into()));
            }
            CameraIntrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
        }
        (None, Some(d)) => read_dataset(d)?.intrinsics,
        (None, None) => return Err(CliError::Usage("need --intrinsics or --dataset".into())),
    };
    if !k.is_valid() {
        return Err(CliError::Usage("invalid intrinsics".into()));
    }
    let ck = read_checkpoint(&a.checkpoint)?;
    let pose = match (&a.pose, a.frame) {
        (Some(s), _) => {
            let v = parse_floats(s, "--pose")?;
            if !(v.len() == 7 || v.len() == 8) {
                return Err(CliError::Usage("--pose needs tx ty tz qx qy qz qw [s]".into()));
            }
            let scale = v.get(7).copied().unwrap_or(1.0);
            let p = Sim3Pose::new(scale, quat_from_xyzw(v[3], v[4], v[5], v[6]), Vector3::new(v[0], v[1], v[2]));
            if !p.is_valid() {
                return Err(CliError::Usage("invalid pose".into()));
            }
            p
        }
        (None, Some(id)) => ck
            .trajectory
            .iter()
            .find(|e| e.timestamp.round() as u32 == id)
            .map(|e| e.pose)
            .ok_or_else(|| CliError::Usage(format!("keyframe {id} is not in the checkpoint")))?,
        (None, None) => return Err(CliError::Usage("need --pose or --frame".into())),
    };
    let out = render(&ck.map.primitives, &ck.map.medium, &pose, &k).map_err(|e| CliError::Numerical(e.to_string()))?;
    write_ppm(&a.out, out.mode(mode))?;
    Ok(format!("wrote {} ({} mode)\n", a.out.display(), mode.name()))
}
