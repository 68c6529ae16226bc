//! Sensor log records and their JSONL encoding.
//!
//! One JSON object per line, `{"t": <seconds>, "type": "...", ...}`. The field
//! layout for each type is documented in `docs/record_schema.md`; matrices are
//! flattened row-major and angles are radians.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeoFix;
use crate::simulator::TruthSample;
use crate::state_estimator::ImuSample;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Pose from the LiDAR-inertial odometry front end, in its own odometry frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LioOdometry {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    /// Row/column order x, y, z, roll, pitch, yaw.
    pub pose_covariance: Matrix6<f64>,
}

/// A motion-compensated scan in the body frame. `labels` identify the
/// physical point each return came from (simulation only; may be empty).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scan {
    pub timestamp: f64,
    pub points: Vec<Vector3<f64>>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SensorRecord {
    Gps(GeoFix),
    Imu(ImuSample),
    Lio(LioOdometry),
    Truth(TruthSample),
    Scan(Scan),
}

impl SensorRecord {
    pub fn timestamp(&self) -> f64 {
        match self {
            SensorRecord::Gps(r) => r.timestamp,
            SensorRecord::Imu(r) => r.timestamp,
            SensorRecord::Lio(r) => r.timestamp,
            SensorRecord::Truth(r) => r.timestamp,
            SensorRecord::Scan(r) => r.timestamp,
        }
    }

    /// Processing order for records sharing a timestamp: differential
    /// sensors before absolute ones, LIO (which emits output) last.
    pub fn tie_rank(&self) -> u8 {
        match self {
            SensorRecord::Imu(_) => 0,
            SensorRecord::Gps(_) => 1,
            SensorRecord::Lio(_) => 2,
            SensorRecord::Truth(_) => 3,
            SensorRecord::Scan(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SensorRecord::Gps(_) => "gps",
            SensorRecord::Imu(_) => "imu",
            SensorRecord::Lio(_) => "lio",
            SensorRecord::Truth(_) => "truth",
            SensorRecord::Scan(_) => "scan",
        }
    }
}

/// Stable merge of per-sensor streams: by timestamp, ties by [`SensorRecord::tie_rank`].
pub fn merge_streams(streams: Vec<Vec<SensorRecord>>) -> Vec<SensorRecord> {
    let mut all: Vec<SensorRecord> = streams.into_iter().flatten().collect();
    all.sort_by(|a, b| {
        a.timestamp()
            .total_cmp(&b.timestamp())
            .then(a.tie_rank().cmp(&b.tie_rank()))
    });
    all
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Debug, Serialize, Deserialize)]
struct WireRecord {
    t: f64,
    #[serde(flatten)]
    payload: WirePayload,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum WirePayload {
    Gps {
        lat: f64,
        lon: f64,
        alt: f64,
        cov: [f64; 9],
        fix_valid: bool,
    },
    Imu {
        rpy: [f64; 3],
        gyro: [f64; 3],
        accel: [f64; 3],
        rpy_cov: [f64; 9],
        gyro_cov: [f64; 9],
        accel_cov: [f64; 9],
    },
    Lio {
        pos: [f64; 3],
        /// x, y, z, w
        quat: [f64; 4],
        cov: Vec<f64>,
    },
    Truth {
        pos: [f64; 3],
        rpy: [f64; 3],
        vel: [f64; 3],
        acc: [f64; 3],
    },
    Scan {
        points: Vec<[f64; 3]>,
        #[serde(default)]
        labels: Vec<u32>,
    },
}

fn m3_to_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

fn m3_from_row_major(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

fn v3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn to_v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn check_cov3(m: &Matrix3<f64>, what: &str) -> Result<(), String> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(format!("{what}: non-finite entry"));
    }
    if (m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1.0) {
        return Err(format!("{what}: not symmetric"));
    }
    if m.diagonal().iter().any(|&d| d < 0.0) {
        return Err(format!("{what}: negative variance"));
    }
    Ok(())
}

fn all_finite<'a>(vals: impl IntoIterator<Item = &'a f64>) -> bool {
    vals.into_iter().all(|v| v.is_finite())
}

impl From<&SensorRecord> for WireRecord {
    fn from(r: &SensorRecord) -> Self {
        let payload = match r {
            SensorRecord::Gps(g) => WirePayload::Gps {
                lat: g.latitude,
                lon: g.longitude,
                alt: g.altitude,
                cov: m3_to_row_major(&g.position_covariance),
                fix_valid: g.fix_valid,
            },
            SensorRecord::Imu(s) => WirePayload::Imu {
                rpy: v3(&s.orientation),
                gyro: v3(&s.angular_velocity),
                accel: v3(&s.linear_acceleration),
                rpy_cov: m3_to_row_major(&s.orientation_covariance),
                gyro_cov: m3_to_row_major(&s.angular_velocity_covariance),
                accel_cov: m3_to_row_major(&s.linear_acceleration_covariance),
            },
            SensorRecord::Lio(l) => {
                let q = l.orientation.quaternion();
                let mut cov = Vec::with_capacity(36);
                for row in 0..6 {
                    for col in 0..6 {
                        cov.push(l.pose_covariance[(row, col)]);
                    }
                }
                WirePayload::Lio {
                    pos: v3(&l.position),
                    quat: [q.i, q.j, q.k, q.w],
                    cov,
                }
            }
            SensorRecord::Truth(t) => WirePayload::Truth {
                pos: v3(&t.position),
                rpy: v3(&t.orientation),
                vel: v3(&t.velocity),
                acc: v3(&t.acceleration),
            },
            SensorRecord::Scan(s) => WirePayload::Scan {
                points: s.points.iter().map(v3).collect(),
                labels: s.labels.clone(),
            },
        };
        WireRecord {
            t: r.timestamp(),
            payload,
        }
    }
}

impl TryFrom<WireRecord> for SensorRecord {
    type Error = String;

    fn try_from(w: WireRecord) -> Result<Self, Self::Error> {
        let t = w.t;
        if !t.is_finite() {
            return Err("non-finite timestamp".into());
        }
        Ok(match w.payload {
            WirePayload::Gps {
                lat,
                lon,
                alt,
                cov,
                fix_valid,
            } => {
                let cov = m3_from_row_major(&cov);
                check_cov3(&cov, "gps cov")?;
                let fix = GeoFix {
                    timestamp: t,
                    latitude: lat,
                    longitude: lon,
                    altitude: alt,
                    position_covariance: cov,
                    fix_valid,
                };
                fix.validate().map_err(|e| e.to_string())?;
                SensorRecord::Gps(fix)
            }
            WirePayload::Imu {
                rpy,
                gyro,
                accel,
                rpy_cov,
                gyro_cov,
                accel_cov,
            } => {
                if !all_finite(rpy.iter().chain(&gyro).chain(&accel)) {
                    return Err("imu: non-finite value".into());
                }
                let s = ImuSample {
                    timestamp: t,
                    orientation: to_v3(&rpy),
                    angular_velocity: to_v3(&gyro),
                    linear_acceleration: to_v3(&accel),
                    orientation_covariance: m3_from_row_major(&rpy_cov),
                    angular_velocity_covariance: m3_from_row_major(&gyro_cov),
                    linear_acceleration_covariance: m3_from_row_major(&accel_cov),
                };
                check_cov3(&s.orientation_covariance, "imu rpy_cov")?;
                check_cov3(&s.angular_velocity_covariance, "imu gyro_cov")?;
                check_cov3(&s.linear_acceleration_covariance, "imu accel_cov")?;
                SensorRecord::Imu(s)
            }
            WirePayload::Lio { pos, quat, cov } => {
                if cov.len() != 36 {
                    return Err(format!("lio cov must have 36 entries, got {}", cov.len()));
                }
                if !all_finite(pos.iter().chain(&quat).chain(&cov)) {
                    return Err("lio: non-finite value".into());
                }
                let q = Quaternion::new(quat[3], quat[0], quat[1], quat[2]);
                let n = q.norm();
                if (n - 1.0).abs() > 1e-6 {
                    return Err(format!("lio quaternion not normalized (norm {n})"));
                }
                let pose_covariance = Matrix6::from_row_slice(&cov);
                if pose_covariance.diagonal().iter().any(|&d| d < 0.0) {
                    return Err("lio cov: negative variance".into());
                }
                SensorRecord::Lio(LioOdometry {
                    timestamp: t,
                    position: to_v3(&pos),
                    orientation: UnitQuaternion::new_unchecked(q),
                    pose_covariance,
                })
            }
            WirePayload::Truth { pos, rpy, vel, acc } => {
                if !all_finite(pos.iter().chain(&rpy).chain(&vel).chain(&acc)) {
                    return Err("truth: non-finite value".into());
                }
                SensorRecord::Truth(TruthSample {
                    timestamp: t,
                    position: to_v3(&pos),
                    orientation: to_v3(&rpy),
                    velocity: to_v3(&vel),
                    acceleration: to_v3(&acc),
                })
            }
            WirePayload::Scan { points, labels } => {
                if !labels.is_empty() && labels.len() != points.len() {
                    return Err("scan: labels and points differ in length".into());
                }
                if !all_finite(points.iter().flatten()) {
                    return Err("scan: non-finite point".into());
                }
                SensorRecord::Scan(Scan {
                    timestamp: t,
                    points: points.iter().map(to_v3).collect(),
                    labels,
                })
            }
        })
    }
}

/// Encodes one record as a single JSON line (no trailing newline).
pub fn encode_record(r: &SensorRecord) -> String {
    serde_json::to_string(&WireRecord::from(r)).expect("records always serialize")
}

/// Decodes one JSON line. `line` is only used for error messages.
pub fn decode_record(text: &str, line: usize) -> Result<SensorRecord, RecordError> {
    let wire: WireRecord = serde_json::from_str(text).map_err(|e| RecordError::Parse {
        line,
        message: e.to_string(),
    })?;
    SensorRecord::try_from(wire).map_err(|message| RecordError::Parse { line, message })
}

pub fn write_log<W: Write>(mut w: W, records: &[SensorRecord]) -> Result<(), RecordError> {
    for r in records {
        writeln!(w, "{}", encode_record(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL log. Blank lines are skipped; line numbers are 1-based.
pub fn read_log<R: BufRead>(r: R) -> Result<Vec<SensorRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_record(&line, i + 1)?);
    }
    Ok(out)
}
