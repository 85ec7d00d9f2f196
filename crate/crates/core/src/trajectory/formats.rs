//! TUM (`timestamp tx ty tz qx qy qz qw`) and KITTI (row-major 3×4 `[R|t]`) text formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::{Pose, Trajectory};
use crate::{Error, Result};

/// Largest entry of |RᵀR − I| accepted from a KITTI row without a warning.
pub const KITTI_ORTHONORMAL_TOLERANCE: f64 = 1e-3;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_numbers(path: &Path, line_no: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let values = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line_no, format!("'{tok}' is not a finite number")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != expected {
        return Err(parse_err(
            path,
            line_no,
            format!("expected {expected} fields, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn push_ordered(path: &Path, line_no: usize, poses: &mut Vec<Pose>, pose: Pose) -> Result<()> {
    if let Some(last) = poses.last() {
        if pose.timestamp <= last.timestamp {
            return Err(parse_err(
                path,
                line_no,
                format!("timestamp {} does not follow {}", pose.timestamp, last.timestamp),
            ));
        }
    }
    poses.push(pose);
    Ok(())
}

/// Parses TUM text; `source` only labels errors.
pub fn parse_tum_str(content: &str, source: &Path) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_numbers(source, i + 1, line, 8)?;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() == 0.0 {
            return Err(parse_err(source, i + 1, "zero quaternion"));
        }
        let pose = Pose {
            timestamp: v[0],
            rotation: UnitQuaternion::from_quaternion(q),
            translation: Vector3::new(v[1], v[2], v[3]),
        };
        push_ordered(source, i + 1, &mut poses, pose)?;
    }
    Trajectory::new(poses)
}

pub fn parse_tum(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum_str(&content, path)
}

/// Nearest rotation (Frobenius sense) to an arbitrary 3×3 matrix.
fn project_to_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let weakest = svd.singular_values.imin();
        fix[(weakest, weakest)] = -1.0;
    }
    Some(u * fix * v_t)
}

/// Parses KITTI odometry poses; the frame index becomes the timestamp.
pub fn parse_kitti_str(content: &str, source: &Path) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let v = parse_numbers(source, i + 1, line, 12)?;
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let deviation = (r.transpose() * r - Matrix3::identity()).amax();
        if deviation > KITTI_ORTHONORMAL_TOLERANCE {
            warn!(
                "{}:{}: rotation deviates from orthonormal by {deviation:.3e}; projecting",
                source.display(),
                i + 1
            );
        }
        let r = project_to_rotation(&r).ok_or_else(|| parse_err(source, i + 1, "rotation SVD failed"))?;
        let pose = Pose {
            timestamp: poses.len() as f64,
            rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
            translation: Vector3::new(v[3], v[7], v[11]),
        };
        push_ordered(source, i + 1, &mut poses, pose)?;
    }
    Trajectory::new(poses)
}

pub fn parse_kitti(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_str(&content, path)
}

/// Shortest round-trip decimal for every value.
pub fn write_tum(traj: &Trajectory) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in traj.poses() {
        let q = p.rotation.quaternion();
        let t = p.translation;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        );
    }
    out
}

pub fn write_kitti(traj: &Trajectory) -> String {
    let mut out = String::new();
    for p in traj.poses() {
        let r = p.rotation.to_rotation_matrix().into_inner();
        let t = p.translation;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {}",
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z
        );
    }
    out
}
