//! Point map assembly from scans and a pose track.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use crate::fusion_gate::GatedPose;

use super::records::{RecordError, Scan};

/// Registered cloud. `labels[i]` is the landmark id of `points[i]` when the
/// scans carried labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointMap {
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<u32>,
    /// Scans outside the trajectory's time range.
    pub skipped_scans: usize,
}

/// Pose at `t` by linear interpolation of position and slerp of orientation.
/// `None` outside `[first, last]`.
pub fn interpolate_pose(traj: &[GatedPose], t: f64) -> Option<(Vector3<f64>, nalgebra::UnitQuaternion<f64>)> {
    let first = traj.first()?;
    let last = traj.last()?;
    if !(t >= first.timestamp && t <= last.timestamp) {
        return None;
    }
    let i = traj.partition_point(|p| p.timestamp <= t);
    if i == 0 {
        return Some((first.position, first.orientation));
    }
    let a = &traj[i - 1];
    if i == traj.len() || a.timestamp == t {
        return Some((a.position, a.orientation));
    }
    let b = &traj[i];
    let s = (t - a.timestamp) / (b.timestamp - a.timestamp);
    let q = a
        .orientation
        .try_slerp(&b.orientation, s, 1e-12)
        .unwrap_or(a.orientation);
    Some((a.position.lerp(&b.position, s), q))
}

/// Transforms every scan into the trajectory frame and concatenates them in
/// scan order. Scans outside the trajectory's time span are skipped.
pub fn assemble_map(traj: &[GatedPose], scans: &[Scan]) -> PointMap {
    let mut map = PointMap::default();
    for scan in scans {
        let Some((p, q)) = interpolate_pose(traj, scan.timestamp) else {
            log::warn!("scan at {} lies outside the trajectory; skipped", scan.timestamp);
            map.skipped_scans += 1;
            continue;
        };
        map.points.extend(scan.points.iter().map(|x| q * x + p));
        if scan.labels.len() == scan.points.len() {
            map.labels.extend_from_slice(&scan.labels);
        }
    }
    if map.labels.len() != map.points.len() {
        map.labels.clear();
    }
    map
}

/// Voxel-grid decimation: one centroid per occupied cell, cells ordered by
/// first occurrence.
pub fn voxel_downsample(points: &[Vector3<f64>], leaf: f64) -> Vec<Vector3<f64>> {
    assert!(leaf > 0.0, "voxel leaf size must be positive");
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut cells: Vec<(Vector3<f64>, usize)> = Vec::new();
    for p in points {
        let key = [0, 1, 2].map(|a| (p[a] / leaf).floor() as i64);
        let slot = *index.entry(key).or_insert_with(|| {
            cells.push((Vector3::zeros(), 0));
            cells.len() - 1
        });
        cells[slot].0 += p;
        cells[slot].1 += 1;
    }
    cells.into_iter().map(|(sum, n)| sum / n as f64).collect()
}

/// Map thickness: for every landmark observed at least twice, the RMS
/// distance of its registered copies from their centroid; averaged over
/// landmarks. `None` when no landmark repeats.
pub fn map_dispersion(map: &PointMap) -> Option<f64> {
    let mut groups: HashMap<u32, Vec<Vector3<f64>>> = HashMap::new();
    for (p, l) in map.points.iter().zip(&map.labels) {
        groups.entry(*l).or_default().push(*p);
    }
    let mut keys: Vec<_> = groups.keys().copied().collect();
    keys.sort_unstable();
    let mut total = 0.0;
    let mut n = 0usize;
    for k in keys {
        let g = &groups[&k];
        if g.len() < 2 {
            continue;
        }
        let c = g.iter().sum::<Vector3<f64>>() / g.len() as f64;
        let ms = g.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / g.len() as f64;
        total += ms.sqrt();
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

/// ASCII cloud: the point count on the first line, then `x y z` per line.
pub fn write_map<W: Write>(mut w: W, points: &[Vector3<f64>]) -> std::io::Result<()> {
    writeln!(w, "{}", points.len())?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    w.flush()
}

pub fn read_map<R: BufRead>(r: R) -> Result<Vec<Vector3<f64>>, RecordError> {
    let mut lines = r.lines();
    let parse_err = |line: usize, message: String| RecordError::Parse { line, message };
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing point count".into()))??;
    let count: usize = header
        .trim()
        .parse()
        .map_err(|e| parse_err(1, format!("point count: {e}")))?;
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        match v {
            Ok(v) if v.len() == 3 => out.push(Vector3::new(v[0], v[1], v[2])),
            Ok(v) => return Err(parse_err(i + 2, format!("expected 3 values, found {}", v.len()))),
            Err(e) => return Err(parse_err(i + 2, e.to_string())),
        }
    }
    if out.len() != count {
        return Err(parse_err(1, format!("header says {count} points, found {}", out.len())));
    }
    Ok(out)
}
