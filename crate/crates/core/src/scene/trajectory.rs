//! Trajectory text: one pose per line, `timestamp tx ty tz qx qy qz qw s`.
//!
//! This is the TUM layout plus a trailing scale column. Readers also accept
//! the plain eight-column form (scale 1). Values are written with
//! round-trip precision.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{quat_from_xyzw, Sim3Pose};
use crate::error::FormatError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub pose: Sim3Pose,
}

pub fn format_trajectory(entries: &[TrajectoryEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let q = e.pose.rotation.into_inner();
        let t = e.pose.translation;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w, e.pose.scale
        )
        .unwrap();
    }
    out
}

/// Parses trajectory text. `path` only labels errors.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<TrajectoryEntry>, FormatError> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| FormatError::bad_line(path, lineno + 1, format!("bad number: {e}")))?;
        if values.len() != 8 && values.len() != 9 {
            return Err(FormatError::bad_line(
                path,
                lineno + 1,
                format!("expected 8 or 9 columns, found {}", values.len()),
            ));
        }
        let scale = values.get(8).copied().unwrap_or(1.0);
        if !(scale > 0.0) {
            return Err(FormatError::bad_line(path, lineno + 1, format!("scale must be positive, got {scale}")));
        }
        let qnorm = values[4..8].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qnorm > 0.0) || !qnorm.is_finite() {
            return Err(FormatError::bad_line(path, lineno + 1, "zero or non-finite quaternion"));
        }
        // unit to rounding: keep the bits so rewriting reproduces the file
        let rotation = if (qnorm - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(Quaternion::new(values[7], values[4], values[5], values[6]))
        } else {
            quat_from_xyzw(values[4], values[5], values[6], values[7])
        };
        entries.push(TrajectoryEntry {
            timestamp: values[0],
            pose: Sim3Pose::new(scale, rotation, Vector3::new(values[1], values[2], values[3])),
        });
    }
    Ok(entries)
}

pub fn write_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), FormatError> {
    std::fs::write(path, format_trajectory(entries)).map_err(|e| FormatError::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    parse_trajectory(&text, path)
}
