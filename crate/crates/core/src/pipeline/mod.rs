//! Time-ordered orchestration of datum initialisation, the EKF and the gate.
//!
//! GPS and IMU records update the filter silently; every LIO record emits one
//! [`GatedPose`]. Records sharing a timestamp are expected in the order
//! IMU, GPS, LIO so the gate sees the freshest filter state.

pub mod map;
pub mod records;
pub mod trajectory;

use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_transform::{build_utm_to_odom, init_datum, utm_to_odom, Datum, UtmToOdom};
use crate::fusion_gate::{
    detect_dropout_intervals, gate, AxisSources, DropoutInterval, GateThresholds, GatedPose, PoseSource,
    UncertaintyDiag,
};
use crate::geodesy::{self, GeoFix};
use crate::state_estimator::{
    make_gps_measurement, make_imu_measurement, predict, Ekf, EkfConfig, EstimatorError, FilterCounters, ImuSample,
};

use records::{LioOdometry, SensorRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("record {index} at t={t} precedes the previous record at t={previous}")]
    Unsorted { index: usize, t: f64, previous: f64 },
    #[error("record {index} has a non-finite timestamp")]
    NonFiniteTimestamp { index: usize },
    #[error("filter failure at t={t}: {source}")]
    Filter { t: f64, source: EstimatorError },
}

/// Where the gate reads its per-axis uncertainty from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintySource {
    /// Position block of the filter's covariance, predicted to the LIO time.
    Filter,
    /// Covariance of the latest GPS fix, rotated into the odometry frame.
    GpsMessage,
}

impl UncertaintySource {
    pub fn as_str(self) -> &'static str {
        match self {
            UncertaintySource::Filter => "filter",
            UncertaintySource::GpsMessage => "gps_message",
        }
    }
}

impl FromStr for UncertaintySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "filter" => Ok(UncertaintySource::Filter),
            "gps_message" => Ok(UncertaintySource::GpsMessage),
            other => Err(format!(
                "unknown uncertainty source '{other}' (expected filter or gps_message)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub ekf: EkfConfig,
    pub thresholds: GateThresholds,
    pub uncertainty_source: UncertaintySource,
    /// When false every axis uses the fused value regardless of uncertainty.
    pub gate_enabled: bool,
    /// Carry the last fused-minus-LIO offset through LIO stretches.
    pub reanchor_on_dropout: bool,
    /// Move pre-datum poses into the odometry frame once the datum exists.
    pub retro_anchor: bool,
    /// A GPS fix older than this counts as absent for `gps_message`, seconds.
    pub gps_timeout: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ekf: EkfConfig::default(),
            thresholds: GateThresholds::default(),
            uncertainty_source: UncertaintySource::GpsMessage,
            gate_enabled: true,
            reanchor_on_dropout: true,
            retro_anchor: false,
            gps_timeout: 1.0,
        }
    }
}

/// One axis changing source between consecutive poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchEvent {
    pub timestamp: f64,
    pub axis: usize,
    pub from: PoseSource,
    pub to: PoseSource,
    /// |fused − LIO| on that axis at the switch, m.
    pub jump: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineCounters {
    pub gps_records: u64,
    pub imu_records: u64,
    pub lio_records: u64,
    pub other_records: u64,
    pub gps_rejected: u64,
    pub imu_rejected: u64,
    pub lio_duplicates: u64,
    pub filter: FilterCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedTrajectory {
    pub poses: Vec<GatedPose>,
    pub dropout_intervals: Vec<DropoutInterval>,
    pub switches: Vec<SwitchEvent>,
    pub counters: PipelineCounters,
    pub warnings: Vec<String>,
    pub datum: Option<Datum>,
    /// Accepted GPS fixes in the odometry frame, with their rotated variances.
    pub gps_track: Vec<(f64, Vector3<f64>, UncertaintyDiag)>,
}

impl FusedTrajectory {
    pub fn uncertainty_series(&self) -> Vec<(f64, UncertaintyDiag)> {
        self.poses.iter().map(|p| (p.timestamp, p.uncertainty)).collect()
    }

    pub fn positions(&self) -> Vec<(f64, Vector3<f64>)> {
        self.poses.iter().map(|p| (p.timestamp, p.position)).collect()
    }
}

/// Rigid map from the LIO frame into the odometry frame.
#[derive(Debug, Clone, Copy)]
struct LioAlignment {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl LioAlignment {
    fn position(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    fn orientation(&self, q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&self.rotation) * q
    }
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    ekf: Ekf,
    datum: Option<Datum>,
    to_odom: Option<UtmToOdom>,
    /// ENU orientation of the first IMU sample; IMU orientations are taken relative to it.
    anchor: Option<Rotation3<f64>>,
    last_imu_rpy: Option<Vector3<f64>>,
    alignment: Option<LioAlignment>,
    last_fix: Option<(f64, UncertaintyDiag)>,
    offset: Vector3<f64>,
    prev_sources: Option<AxisSources>,
    out: FusedTrajectory,
}

fn rpy_of(r: &Rotation3<f64>) -> Vector3<f64> {
    let (roll, pitch, yaw) = r.euler_angles();
    Vector3::new(roll, pitch, yaw)
}

fn rot_of(rpy: &Vector3<f64>) -> Rotation3<f64> {
    Rotation3::from_euler_angles(rpy.x, rpy.y, rpy.z)
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a PipelineConfig) -> Self {
        Self {
            cfg,
            ekf: Ekf::new(cfg.ekf.clone()),
            datum: None,
            to_odom: None,
            anchor: None,
            last_imu_rpy: None,
            alignment: None,
            last_fix: None,
            offset: Vector3::zeros(),
            prev_sources: None,
            out: FusedTrajectory {
                poses: Vec::new(),
                dropout_intervals: Vec::new(),
                switches: Vec::new(),
                counters: PipelineCounters::default(),
                warnings: Vec::new(),
                datum: None,
                gps_track: Vec::new(),
            },
        }
    }

    fn filter_err(t: f64) -> impl FnOnce(EstimatorError) -> PipelineError {
        move |source| PipelineError::Filter { t, source }
    }

    fn on_imu(&mut self, s: &ImuSample) -> Result<(), PipelineError> {
        self.out.counters.imu_records += 1;
        let enu = rot_of(&s.orientation);
        let anchor = *self.anchor.get_or_insert(enu);
        let mut local = s.clone();
        local.orientation = rpy_of(&(anchor.inverse() * enu));
        self.last_imu_rpy = Some(local.orientation);
        let m = match make_imu_measurement(&local) {
            Ok(m) => m,
            Err(e) => {
                self.out.counters.imu_rejected += 1;
                self.ekf.note_rejected();
                log::warn!("rejecting IMU sample at {}: {e}", s.timestamp);
                return Ok(());
            }
        };
        self.ekf.process(&m).map_err(Self::filter_err(s.timestamp))?;
        Ok(())
    }

    fn reject_gps(&mut self, fix: &GeoFix, why: &str) {
        self.out.counters.gps_rejected += 1;
        self.ekf.note_rejected();
        log::warn!("rejecting GPS fix at {}: {why}", fix.timestamp);
    }

    fn on_gps(&mut self, fix: &GeoFix) -> Result<(), PipelineError> {
        self.out.counters.gps_records += 1;
        if let Err(e) = fix.validate() {
            self.reject_gps(fix, &e.to_string());
            return Ok(());
        }
        if !fix.fix_valid {
            self.reject_gps(fix, "no fix");
            return Ok(());
        }
        if self.datum.is_none() {
            let utm = match geodesy::latlon_to_utm(fix, None) {
                Ok(u) => u,
                Err(e) => {
                    self.reject_gps(fix, &e.to_string());
                    return Ok(());
                }
            };
            let rpy = match self.anchor {
                Some(a) => rpy_of(&a),
                None => {
                    self.warn("datum initialised before any IMU sample; using zero orientation".into());
                    Vector3::zeros()
                }
            };
            let datum = init_datum(utm, (rpy.x, rpy.y, rpy.z)).expect("validated fix yields a finite datum");
            let var = fix.position_covariance.diagonal().max();
            self.ekf
                .predict_to(fix.timestamp)
                .map_err(Self::filter_err(fix.timestamp))?;
            self.ekf.reset_position(&Vector3::zeros(), var);
            self.to_odom = Some(build_utm_to_odom(&datum));
            self.datum = Some(datum);
            log::info!("datum set at t={} in zone {}", fix.timestamp, datum.zone);
        }
        let tf = self.to_odom.as_ref().expect("datum set above");
        let utm = match geodesy::latlon_to_utm(fix, Some(tf.zone())) {
            Ok(u) => u,
            Err(e) => {
                self.reject_gps(fix, &e.to_string());
                return Ok(());
            }
        };
        let p = match utm_to_odom(tf, &utm) {
            Ok(p) => p,
            Err(e) => {
                self.reject_gps(fix, &e.to_string());
                return Ok(());
            }
        };
        let cov = tf.rotate_covariance(&fix.position_covariance);
        let diag = UncertaintyDiag::from_vector(&cov.diagonal());
        self.last_fix = Some((fix.timestamp, diag));
        self.out.gps_track.push((fix.timestamp, p, diag));
        match make_gps_measurement(&p, &cov, fix.timestamp) {
            Ok(m) => {
                self.ekf.process(&m).map_err(Self::filter_err(fix.timestamp))?;
            }
            Err(e) => self.reject_gps(fix, &e.to_string()),
        }
        Ok(())
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.out.warnings.push(msg);
    }

    /// Filter position and covariance at `t` without touching the filter.
    fn fused_at(&self, t: f64) -> Result<(Vector3<f64>, Matrix3<f64>), PipelineError> {
        let mut x = *self.ekf.state();
        let mut p = *self.ekf.covariance();
        if let Some(now) = self.ekf.time() {
            if t > now {
                (x, p) = predict(&x, &p, &self.ekf.config().process_noise, t - now).map_err(Self::filter_err(t))?;
            }
        }
        Ok((x.position(), p.0.fixed_view::<3, 3>(0, 0).into_owned()))
    }

    fn uncertainty_at(&self, t: f64, filter_cov: &Matrix3<f64>) -> UncertaintyDiag {
        match self.cfg.uncertainty_source {
            UncertaintySource::Filter => UncertaintyDiag::from_vector(&filter_cov.diagonal()),
            UncertaintySource::GpsMessage => match self.last_fix {
                Some((tf, u)) if t - tf <= self.cfg.gps_timeout => u,
                _ => UncertaintyDiag::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            },
        }
    }

    fn on_lio(&mut self, lio: &LioOdometry) -> Result<(), PipelineError> {
        self.out.counters.lio_records += 1;
        if let Some(last) = self.out.poses.last() {
            if lio.timestamp <= last.timestamp {
                self.out.counters.lio_duplicates += 1;
                log::warn!(
                    "dropping LIO record at {} (not after {})",
                    lio.timestamp,
                    last.timestamp
                );
                return Ok(());
            }
        }
        if self.datum.is_none() {
            self.out.poses.push(GatedPose {
                timestamp: lio.timestamp,
                position: lio.position,
                orientation: lio.orientation,
                sources: [PoseSource::Lio; 3],
                uncertainty: UncertaintyDiag::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
                pre_datum: true,
            });
            return Ok(());
        }
        let (fused, cov) = self.fused_at(lio.timestamp)?;
        let align = match self.alignment {
            Some(a) => a,
            None => {
                let body = self
                    .last_imu_rpy
                    .map(|r| rot_of(&r))
                    .unwrap_or_else(Rotation3::identity);
                let rotation = body * lio.orientation.to_rotation_matrix().inverse();
                let a = LioAlignment {
                    rotation,
                    translation: fused - rotation * lio.position,
                };
                self.alignment = Some(a);
                a
            }
        };
        let lio_odom = align.position(&lio.position);
        let lio_state = if self.cfg.reanchor_on_dropout {
            lio_odom + self.offset
        } else {
            lio_odom
        };
        let u = self.uncertainty_at(lio.timestamp, &cov);
        let sel = if self.cfg.gate_enabled {
            gate(&fused, &lio_state, &u, &self.cfg.thresholds, self.prev_sources.as_ref())
        } else {
            gate(
                &fused,
                &lio_state,
                &UncertaintyDiag::new(0.0, 0.0, 0.0),
                &self.cfg.thresholds,
                None,
            )
        };
        if let Some(prev) = self.prev_sources {
            for a in 0..3 {
                if prev[a] != sel.sources[a] {
                    self.out.switches.push(SwitchEvent {
                        timestamp: lio.timestamp,
                        axis: a,
                        from: prev[a],
                        to: sel.sources[a],
                        jump: (fused[a] - lio_state[a]).abs(),
                    });
                }
            }
        }
        if self.cfg.reanchor_on_dropout {
            for a in 0..3 {
                if sel.sources[a] == PoseSource::Fusion {
                    self.offset[a] = fused[a] - lio_odom[a];
                }
            }
        }
        self.prev_sources = Some(sel.sources);
        self.out.poses.push(GatedPose {
            timestamp: lio.timestamp,
            position: sel.position,
            orientation: align.orientation(&lio.orientation),
            sources: sel.sources,
            uncertainty: u,
            pre_datum: false,
        });
        Ok(())
    }

    fn finish(mut self) -> FusedTrajectory {
        if self.datum.is_none() {
            if self.out.counters.gps_records == 0 {
                self.warn("no GPS records in log; output is LIO only".into());
            } else {
                self.warn("no valid GPS fix in log; output is LIO only".into());
            }
        } else if self.cfg.retro_anchor {
            if let Some(a) = self.alignment {
                for p in self.out.poses.iter_mut().filter(|p| p.pre_datum) {
                    p.position = a.position(&p.position);
                    p.orientation = a.orientation(&p.orientation);
                    p.pre_datum = false;
                }
            }
        }
        let series: Vec<_> = self
            .out
            .poses
            .iter()
            .filter(|p| !p.pre_datum)
            .map(|p| (p.timestamp, p.uncertainty))
            .collect();
        self.out.dropout_intervals = if self.cfg.gate_enabled {
            detect_dropout_intervals(&series, &self.cfg.thresholds)
        } else {
            Vec::new()
        };
        self.out.counters.filter = self.ekf.counters();
        self.out.datum = self.datum;
        self.out
    }
}

/// Runs the whole log. `records` must be sorted by timestamp.
pub fn run(records: &[SensorRecord], cfg: &PipelineConfig) -> Result<FusedTrajectory, PipelineError> {
    let mut runner = Runner::new(cfg);
    let mut previous = f64::NEG_INFINITY;
    for (index, r) in records.iter().enumerate() {
        let t = r.timestamp();
        if !t.is_finite() {
            return Err(PipelineError::NonFiniteTimestamp { index });
        }
        if t < previous {
            return Err(PipelineError::Unsorted { index, t, previous });
        }
        previous = t;
        match r {
            SensorRecord::Imu(s) => runner.on_imu(s)?,
            SensorRecord::Gps(f) => runner.on_gps(f)?,
            SensorRecord::Lio(l) => runner.on_lio(l)?,
            SensorRecord::Truth(_) | SensorRecord::Scan(_) => runner.out.counters.other_records += 1,
        }
    }
    Ok(runner.finish())
}
