//! Deterministic ground truth and sensor stream generation.
//!
//! Every sensor draws from its own ChaCha8 stream derived from
//! `(seed, sensor id)`, so adding or reconfiguring one sensor never perturbs
//! another's noise.
//!
//! Frames: truth lives in the odometry frame, whose origin is the vehicle's
//! start position and whose axes are the vehicle's initial body axes. The
//! odometry frame is placed in the world at `geographic_origin` with yaw
//! `initial_heading` (ENU, counterclockwise from east).

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_transform::{init_datum, wrap_angle, Datum};
use crate::geodesy::{self, GeoFix, GeodesyError};
use crate::pipeline::records::{merge_streams, LioOdometry, Scan, SensorRecord};
use crate::state_estimator::ImuSample;

/// Standard gravity, m/s².
pub const GRAVITY: f64 = 9.80665;

/// Smallest variance ever reported by a simulated sensor.
const REPORTED_VARIANCE_FLOOR: f64 = 1e-10;
/// GPS position variance floor, m².
const GPS_VARIANCE_FLOOR: f64 = 1e-6;

const STREAM_GPS: u64 = 1;
const STREAM_IMU: u64 = 2;
const STREAM_LIO: u64 = 3;
const STREAM_SCAN: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// A circle of circumference `path_length` driven at `speed`.
    Loop,
    /// Lemniscate of Gerono spanning about `path_length` per lap, driven at `speed`.
    FigureEight,
    /// Exactly `runs` laps of the `Loop` circle over `duration`.
    MultiRunLoop,
    /// Out `path_length` metres along +x and back (in reverse) over `duration`.
    StraightOutAndBack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub seed: u64,
    /// Seconds.
    pub duration: f64,
    pub gps_rate: f64,
    pub imu_rate: f64,
    pub lio_rate: f64,
    /// Scan rate for map assembly; 0 disables scans.
    pub scan_rate: f64,
    pub trajectory_kind: TrajectoryKind,
    /// Laps for `multi_run_loop`.
    pub runs: u32,
    /// Circumference (loops), lap length (figure eight) or one-way length (out and back), m.
    pub path_length: f64,
    /// m/s, for `loop` and `figure_eight`.
    pub speed: f64,
    /// Terrain undulation amplitude, m (loop kinds only).
    pub z_amplitude: f64,
    pub origin_latitude: f64,
    pub origin_longitude: f64,
    pub origin_altitude: f64,
    /// Yaw of the odometry frame in ENU, radians.
    pub initial_heading: f64,
    /// Per-axis GPS noise, m.
    pub gps_noise_sigma: f64,
    /// `[start, end]` seconds, inclusive.
    pub dropout_windows: Vec<[f64; 2]>,
    /// Reported (and injected) variance during dropouts, m².
    pub dropout_covariance: f64,
    /// Position error accrued per metre travelled, per axis.
    pub lio_drift_rate: f64,
    /// Additive position random walk, m/√s.
    pub lio_bias_walk_sigma: f64,
    /// LIO yaw drift, rad/s.
    pub lio_yaw_drift_rate: f64,
    pub imu_orientation_sigma: f64,
    pub imu_gyro_sigma: f64,
    pub imu_accel_sigma: f64,
    /// Spacing of simulated landmarks along the path, m.
    pub landmark_spacing: f64,
    /// Lateral offset of landmarks from the path, m.
    pub landmark_offset: f64,
    pub scan_range: f64,
    pub scan_noise_sigma: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 42,
            duration: 400.0,
            gps_rate: 10.0,
            imu_rate: 100.0,
            lio_rate: 10.0,
            scan_rate: 1.0,
            trajectory_kind: TrajectoryKind::MultiRunLoop,
            runs: 4,
            path_length: 500.0,
            speed: 5.0,
            z_amplitude: 5.0,
            origin_latitude: 43.9450,
            origin_longitude: -78.8960,
            origin_altitude: 100.0,
            initial_heading: 0.5,
            gps_noise_sigma: 0.03,
            dropout_windows: vec![[80.0, 90.0], [190.0, 200.0], [300.0, 310.0]],
            dropout_covariance: 1e4,
            lio_drift_rate: 0.01,
            lio_bias_walk_sigma: 0.01,
            lio_yaw_drift_rate: 1e-5,
            imu_orientation_sigma: 5e-4,
            imu_gyro_sigma: 5e-3,
            imu_accel_sigma: 5e-2,
            landmark_spacing: 10.0,
            landmark_offset: 6.0,
            scan_range: 15.0,
            scan_noise_sigma: 0.01,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return bad(format!("duration {} must be >= 0", self.duration));
        }
        for (name, r) in [
            ("gps_rate", self.gps_rate),
            ("imu_rate", self.imu_rate),
            ("lio_rate", self.lio_rate),
        ] {
            if !(r.is_finite() && r > 0.0) {
                return bad(format!("{name} must be > 0"));
            }
        }
        if !(self.scan_rate.is_finite() && self.scan_rate >= 0.0) {
            return bad("scan_rate must be >= 0".into());
        }
        if !(self.path_length.is_finite() && self.path_length > 0.0) {
            return bad("path_length must be > 0".into());
        }
        if self.trajectory_kind == TrajectoryKind::MultiRunLoop && self.runs == 0 {
            return bad("multi_run_loop needs runs >= 1".into());
        }
        if matches!(self.trajectory_kind, TrajectoryKind::Loop | TrajectoryKind::FigureEight)
            && !(self.speed.is_finite() && self.speed > 0.0)
        {
            return bad("speed must be > 0".into());
        }
        for w in &self.dropout_windows {
            if !(w[0] <= w[1] && w[0] >= 0.0 && w[1] <= self.duration) {
                return bad(format!("dropout window {w:?} outside [0, duration]"));
            }
        }
        let sigmas = [
            self.gps_noise_sigma,
            self.dropout_covariance,
            self.lio_drift_rate,
            self.lio_bias_walk_sigma,
            self.imu_orientation_sigma,
            self.imu_gyro_sigma,
            self.imu_accel_sigma,
            self.scan_noise_sigma,
            self.z_amplitude,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise parameters must be finite and >= 0".into());
        }
        if !self.lio_yaw_drift_rate.is_finite() || !self.initial_heading.is_finite() {
            return bad("non-finite drift or heading".into());
        }
        if self.scan_rate > 0.0 && !(self.landmark_spacing > 0.0 && self.scan_range > 0.0) {
            return bad("landmark_spacing and scan_range must be > 0 when scans are enabled".into());
        }
        geodesy::project(self.origin_latitude, self.origin_longitude, self.origin_altitude, None)?;
        Ok(())
    }

    /// Datum corresponding to the true first fix and initial orientation.
    pub fn true_datum(&self) -> Result<Datum, ScenarioError> {
        let utm0 = geodesy::project(self.origin_latitude, self.origin_longitude, self.origin_altitude, None)?;
        init_datum(utm0, (0.0, 0.0, self.initial_heading)).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    /// Lap period for the periodic kinds.
    pub fn loop_period(&self) -> Option<f64> {
        match self.trajectory_kind {
            TrajectoryKind::Loop | TrajectoryKind::FigureEight => Some(self.path_length / self.speed),
            TrajectoryKind::MultiRunLoop => Some(self.duration / f64::from(self.runs)),
            TrajectoryKind::StraightOutAndBack => None,
        }
    }

    pub fn in_dropout(&self, t: f64) -> bool {
        self.dropout_windows.iter().any(|w| t >= w[0] && t <= w[1])
    }
}

/// Sample times `k / rate` for `k = 0..=floor(duration·rate)`; empty for a
/// zero-length scenario.
pub fn sample_times(duration: f64, rate: f64) -> Vec<f64> {
    if duration <= 0.0 || rate <= 0.0 {
        return Vec::new();
    }
    let n = (duration * rate + 1e-9).floor() as u64;
    (0..=n).map(|k| k as f64 / rate).collect()
}

/// True kinematic state at one instant. Position, velocity and acceleration
/// are in the odometry frame; orientation is roll/pitch/yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl TruthSample {
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.orientation.x, self.orientation.y, self.orientation.z)
    }

    /// Yaw rate implied by the planar velocity and acceleration.
    pub fn yaw_rate(&self) -> f64 {
        let (vx, vy) = (self.velocity.x, self.velocity.y);
        let s2 = vx * vx + vy * vy;
        if s2 < 1e-18 {
            0.0
        } else {
            (vx * self.acceleration.y - vy * self.acceleration.x) / s2
        }
    }
}

/// Analytic, C² trajectory for a scenario.
#[derive(Debug, Clone)]
pub struct Trajectory {
    kind: TrajectoryKind,
    duration: f64,
    /// Circle radius or lemniscate amplitude or out-and-back length.
    scale: f64,
    /// Angular rate of the path parameter, rad/s.
    omega: f64,
    z_amplitude: f64,
    /// Rotation applied so the initial heading is +x.
    heading_fix: f64,
}

impl Trajectory {
    pub fn new(s: &Scenario) -> Self {
        use std::f64::consts::{PI, TAU};
        let (scale, omega, heading_fix) = match s.trajectory_kind {
            TrajectoryKind::Loop => {
                let r = s.path_length / TAU;
                (r, s.speed / r, 0.0)
            }
            TrajectoryKind::MultiRunLoop => {
                let r = s.path_length / TAU;
                let omega = if s.duration > 0.0 {
                    TAU * f64::from(s.runs) / s.duration
                } else {
                    0.0
                };
                (r, omega, 0.0)
            }
            TrajectoryKind::FigureEight => {
                // The Gerono lemniscate with amplitude A is about 6.1·A long.
                let a = s.path_length / 6.1;
                (a, TAU * s.speed / s.path_length, -PI / 4.0)
            }
            TrajectoryKind::StraightOutAndBack => {
                let omega = if s.duration > 0.0 { TAU / s.duration } else { 0.0 };
                (s.path_length, omega, 0.0)
            }
        };
        Self {
            kind: s.trajectory_kind,
            duration: s.duration,
            scale,
            omega,
            z_amplitude: match s.trajectory_kind {
                TrajectoryKind::StraightOutAndBack => 0.0,
                _ => s.z_amplitude,
            },
            heading_fix,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// Raw (position, velocity, acceleration) before the heading fix.
    fn raw(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let w = self.omega;
        let th = w * t;
        let (s, c) = th.sin_cos();
        let (s2, c2) = (2.0 * th).sin_cos();
        let za = self.z_amplitude;
        let z = Vector3::new(za * s2, 2.0 * za * w * c2, -4.0 * za * w * w * s2);
        match self.kind {
            TrajectoryKind::Loop | TrajectoryKind::MultiRunLoop => {
                let r = self.scale;
                (
                    Vector3::new(r * s, r * (1.0 - c), z.x),
                    Vector3::new(r * w * c, r * w * s, z.y),
                    Vector3::new(-r * w * w * s, r * w * w * c, z.z),
                )
            }
            TrajectoryKind::FigureEight => {
                let a = self.scale;
                (
                    Vector3::new(a * s, 0.5 * a * s2, z.x),
                    Vector3::new(a * w * c, a * w * c2, z.y),
                    Vector3::new(-a * w * w * s, -2.0 * a * w * w * s2, z.z),
                )
            }
            TrajectoryKind::StraightOutAndBack => {
                let l = self.scale;
                (
                    Vector3::new(0.5 * l * (1.0 - c), 0.0, 0.0),
                    Vector3::new(0.5 * l * w * s, 0.0, 0.0),
                    Vector3::new(0.5 * l * w * w * c, 0.0, 0.0),
                )
            }
        }
    }

    pub fn at(&self, t: f64) -> TruthSample {
        let (p, v, a) = self.raw(t);
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), self.heading_fix);
        let (p, v, a) = (rz * p, rz * v, rz * a);
        let yaw = match self.kind {
            // Drives back in reverse, so the body never turns.
            TrajectoryKind::StraightOutAndBack => 0.0,
            _ => wrap_angle(v.y.atan2(v.x)),
        };
        TruthSample {
            timestamp: t,
            position: p,
            orientation: Vector3::new(0.0, 0.0, yaw),
            velocity: v,
            acceleration: a,
        }
    }
}

/// Truth sampled at the fastest sensor rate.
pub fn generate_ground_truth(s: &Scenario) -> Result<Vec<TruthSample>, ScenarioError> {
    s.validate()?;
    let traj = Trajectory::new(s);
    let rate = s.gps_rate.max(s.imu_rate).max(s.lio_rate);
    Ok(sample_times(s.duration, rate).into_iter().map(|t| traj.at(t)).collect())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and >= 0")
}

fn noise3(rng: &mut ChaCha8Rng, d: &Normal<f64>) -> Vector3<f64> {
    Vector3::new(d.sample(rng), d.sample(rng), d.sample(rng))
}

/// GPS fixes at `gps_rate`. Outside dropouts the noise is `gps_noise_sigma`
/// per ENU axis; inside a dropout window the noise scale is
/// `sqrt(dropout_covariance)` and the reported covariance is inflated to match.
pub fn simulate_gps(truth: &Trajectory, s: &Scenario) -> Result<Vec<GeoFix>, ScenarioError> {
    s.validate()?;
    let datum = s.true_datum()?;
    let mut rng = rng_for(s.seed, STREAM_GPS);
    let nominal = normal(s.gps_noise_sigma);
    let dropout = normal(s.dropout_covariance.sqrt());
    let mut out = Vec::new();
    for t in sample_times(s.duration, s.gps_rate) {
        let p = truth.at(t).position;
        let utm = datum.odom_to_utm(&p);
        let in_dropout = s.in_dropout(t);
        let (noise, var) = if in_dropout {
            (noise3(&mut rng, &dropout), s.dropout_covariance)
        } else {
            (noise3(&mut rng, &nominal), s.gps_noise_sigma * s.gps_noise_sigma)
        };
        let mut noisy = utm;
        noisy.easting += noise.x;
        noisy.northing += noise.y;
        noisy.altitude += noise.z;
        let mut fix = geodesy::utm_to_latlon(&noisy, t)?;
        fix.position_covariance = Matrix3::identity() * var.max(GPS_VARIANCE_FLOOR);
        out.push(fix);
    }
    Ok(out)
}

/// LIO odometry at `lio_rate`: relative truth motion plus per-axis drift
/// proportional to distance travelled along that axis, plus an additive
/// random walk.
pub fn simulate_lio(truth: &Trajectory, s: &Scenario) -> Result<Vec<LioOdometry>, ScenarioError> {
    s.validate()?;
    let mut rng = rng_for(s.seed, STREAM_LIO);
    let mut out = Vec::new();
    let mut prev_truth: Option<Vector3<f64>> = None;
    let mut prev_t = 0.0;
    let mut pos = Vector3::zeros();
    for t in sample_times(s.duration, s.lio_rate) {
        let tr = truth.at(t);
        match prev_truth {
            None => pos = tr.position,
            Some(pt) => {
                let delta = tr.position - pt;
                pos += delta + delta.abs() * s.lio_drift_rate;
                if s.lio_bias_walk_sigma > 0.0 {
                    let d = normal(s.lio_bias_walk_sigma * (t - prev_t).sqrt());
                    pos += noise3(&mut rng, &d);
                }
            }
        }
        prev_truth = Some(tr.position);
        prev_t = t;
        let rpy = tr.orientation;
        out.push(LioOdometry {
            timestamp: t,
            position: pos,
            orientation: UnitQuaternion::from_euler_angles(rpy.x, rpy.y, rpy.z + s.lio_yaw_drift_rate * t),
            pose_covariance: Matrix6::identity() * 1e-2,
        });
    }
    Ok(out)
}

/// IMU samples at `imu_rate`: ENU orientation, body rates, and body
/// acceleration with gravity removed.
pub fn simulate_imu(truth: &Trajectory, s: &Scenario) -> Result<Vec<ImuSample>, ScenarioError> {
    s.validate()?;
    let mut rng = rng_for(s.seed, STREAM_IMU);
    let d_ori = normal(s.imu_orientation_sigma);
    let d_gyro = normal(s.imu_gyro_sigma);
    let d_acc = normal(s.imu_accel_sigma);
    let heading = Rotation3::from_axis_angle(&Vector3::z_axis(), s.initial_heading);
    let var = |sigma: f64| Matrix3::identity() * (sigma * sigma).max(REPORTED_VARIANCE_FLOOR);
    let mut out = Vec::new();
    for t in sample_times(s.duration, s.imu_rate) {
        let tr = truth.at(t);
        let body = tr.rotation();
        let (r, p, y) = (heading * body).euler_angles();
        let orientation = Vector3::new(r, p, y) + noise3(&mut rng, &d_ori);
        // Roll and pitch stay zero along every simulated path, so body rates
        // equal Euler rates.
        let angular_velocity = Vector3::new(0.0, 0.0, tr.yaw_rate()) + noise3(&mut rng, &d_gyro);
        let linear_acceleration = body.inverse() * tr.acceleration + noise3(&mut rng, &d_acc);
        out.push(ImuSample {
            timestamp: t,
            orientation: orientation.map(wrap_angle),
            angular_velocity,
            linear_acceleration,
            orientation_covariance: var(s.imu_orientation_sigma),
            angular_velocity_covariance: var(s.imu_gyro_sigma),
            linear_acceleration_covariance: var(s.imu_accel_sigma),
        });
    }
    Ok(out)
}

/// Fixed landmarks on both sides of the path (first lap only for the
/// periodic kinds, so repeated passes see the same points).
pub fn landmarks(truth: &Trajectory, s: &Scenario) -> Vec<Vector3<f64>> {
    if s.scan_rate <= 0.0 || s.duration <= 0.0 {
        return Vec::new();
    }
    let span = s.loop_period().unwrap_or(s.duration / 2.0).min(s.duration);
    // Walk the path in small steps and drop a pair of posts every `landmark_spacing` metres.
    let dt = 0.01;
    let mut out = Vec::new();
    let mut since = s.landmark_spacing;
    let mut prev = truth.at(0.0).position;
    let mut t = 0.0;
    while t <= span {
        let tr = truth.at(t);
        since += (tr.position - prev).norm();
        prev = tr.position;
        if since >= s.landmark_spacing {
            since = 0.0;
            let yaw = tr.orientation.z;
            let left = Vector3::new(-yaw.sin(), yaw.cos(), 0.0) * s.landmark_offset;
            let lift = Vector3::new(0.0, 0.0, 1.0);
            out.push(tr.position + left + lift);
            out.push(tr.position - left + lift);
        }
        t += dt;
    }
    out
}

/// Body-frame scans of the landmarks within `scan_range`.
pub fn simulate_scans(truth: &Trajectory, s: &Scenario) -> Result<Vec<Scan>, ScenarioError> {
    s.validate()?;
    if s.scan_rate <= 0.0 {
        return Ok(Vec::new());
    }
    let marks = landmarks(truth, s);
    let mut rng = rng_for(s.seed, STREAM_SCAN);
    let d = normal(s.scan_noise_sigma);
    let mut out = Vec::new();
    for t in sample_times(s.duration, s.scan_rate) {
        let tr = truth.at(t);
        let inv = tr.rotation().inverse();
        let mut scan = Scan {
            timestamp: t,
            ..Scan::default()
        };
        for (i, m) in marks.iter().enumerate() {
            if (m - tr.position).norm() <= s.scan_range {
                scan.points.push(inv * (m - tr.position) + noise3(&mut rng, &d));
                scan.labels.push(i as u32);
            }
        }
        out.push(scan);
    }
    Ok(out)
}

/// Every stream of one simulated run.
#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub truth: Vec<TruthSample>,
    pub gps: Vec<GeoFix>,
    pub imu: Vec<ImuSample>,
    pub lio: Vec<LioOdometry>,
    pub scans: Vec<Scan>,
}

impl SimulatedRun {
    /// Merged log in processing order.
    pub fn records(&self) -> Vec<SensorRecord> {
        merge_streams(vec![
            self.truth.iter().copied().map(SensorRecord::Truth).collect(),
            self.gps.iter().cloned().map(SensorRecord::Gps).collect(),
            self.imu.iter().cloned().map(SensorRecord::Imu).collect(),
            self.lio.iter().cloned().map(SensorRecord::Lio).collect(),
            self.scans.iter().cloned().map(SensorRecord::Scan).collect(),
        ])
    }
}

pub fn simulate(s: &Scenario) -> Result<SimulatedRun, ScenarioError> {
    s.validate()?;
    let traj = Trajectory::new(s);
    Ok(SimulatedRun {
        truth: generate_ground_truth(s)?,
        gps: simulate_gps(&traj, s)?,
        imu: simulate_imu(&traj, s)?,
        lio: simulate_lio(&traj, s)?,
        scans: simulate_scans(&traj, s)?,
    })
}
