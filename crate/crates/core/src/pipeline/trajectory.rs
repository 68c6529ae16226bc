//! Trajectory text format: one pose per line,
//! `timestamp x y z qx qy qz qw source_x source_y source_z var_x var_y var_z`,
//! space separated, preceded by a `#` header line. Numbers use Rust's
//! shortest round-trip formatting, so reading back is exact.

use std::io::{BufRead, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::fusion_gate::{GatedPose, PoseSource, UncertaintyDiag};

use super::records::RecordError;

pub const TRAJECTORY_HEADER: &str = "# timestamp x y z qx qy qz qw source_x source_y source_z var_x var_y var_z";

pub fn format_pose(p: &GatedPose) -> String {
    let q = p.orientation.quaternion();
    let u = p.uncertainty;
    format!(
        "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        p.timestamp,
        p.position.x,
        p.position.y,
        p.position.z,
        q.i,
        q.j,
        q.k,
        q.w,
        p.sources[0].as_str(),
        p.sources[1].as_str(),
        p.sources[2].as_str(),
        u.var_x,
        u.var_y,
        u.var_z
    )
}

pub fn write_trajectory<W: Write>(mut w: W, poses: &[GatedPose]) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for p in poses {
        writeln!(w, "{}", format_pose(p))?;
    }
    w.flush()
}

fn parse_line(text: &str, line: usize) -> Result<GatedPose, RecordError> {
    let err = |message: String| RecordError::Parse { line, message };
    let cols: Vec<&str> = text.split_whitespace().collect();
    if cols.len() != 14 {
        return Err(err(format!("expected 14 columns, found {}", cols.len())));
    }
    let num = |i: usize| -> Result<f64, RecordError> {
        cols[i]
            .parse::<f64>()
            .map_err(|e| err(format!("column {}: {e}", i + 1)))
    };
    let src = |i: usize| -> Result<PoseSource, RecordError> {
        cols[i]
            .parse::<PoseSource>()
            .map_err(|e| err(format!("column {}: {e}", i + 1)))
    };
    let q = Quaternion::new(num(7)?, num(4)?, num(5)?, num(6)?);
    if !(q.norm() - 1.0).abs().lt(&1e-6) {
        return Err(err(format!("quaternion norm {} is not 1", q.norm())));
    }
    Ok(GatedPose {
        timestamp: num(0)?,
        position: Vector3::new(num(1)?, num(2)?, num(3)?),
        orientation: UnitQuaternion::new_unchecked(q),
        sources: [src(8)?, src(9)?, src(10)?],
        uncertainty: UncertaintyDiag::new(num(11)?, num(12)?, num(13)?),
        pre_datum: false,
    })
}

/// Reads a trajectory; `#` lines and blank lines are skipped. Line numbers
/// in errors are 1-based.
pub fn read_trajectory<R: BufRead>(r: R) -> Result<Vec<GatedPose>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let pose = parse_line(t, i + 1)?;
        if let Some(prev) = out.last().map(|p: &GatedPose| p.timestamp) {
            if pose.timestamp <= prev {
                return Err(RecordError::Parse {
                    line: i + 1,
                    message: format!("timestamp {} does not increase", pose.timestamp),
                });
            }
        }
        out.push(pose);
    }
    Ok(out)
}

/// Wraps bare positions as all-LIO poses with zero variance and identity
/// orientation, for writing reference tracks.
pub fn poses_from_positions(track: &[(f64, Vector3<f64>)]) -> Vec<GatedPose> {
    track
        .iter()
        .map(|(t, p)| GatedPose {
            timestamp: *t,
            position: *p,
            orientation: UnitQuaternion::identity(),
            sources: [PoseSource::Lio; 3],
            uncertainty: UncertaintyDiag::default(),
            pre_datum: false,
        })
        .collect()
}
