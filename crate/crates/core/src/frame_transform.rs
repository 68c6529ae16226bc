//! Session datum and the UTM -> odometry-frame transform.
//!
//! The robot's odometry frame is anchored at the first valid GPS fix: its
//! origin is that fix's UTM position and its axes are rotated by the vehicle's
//! initial UTM-frame orientation. A UTM point `p` maps into the odometry frame
//! as `T⁻¹·p`, where `T = [R | t]` with `R = Rz(yaw)·Ry(pitch)·Rx(roll)` and
//! `t` the anchor position.
//!
//! The published form of this matrix has a couple of entries that do not match
//! the ZYX composition (row one carries `sθ·sψ` where the composition gives
//! `sφ·sψ`). `R` is composed from the three elementary rotations here rather
//! than transcribed entry by entry.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{Hemisphere, UtmCoord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("datum already initialized")]
    AlreadyInitialized,
    #[error("datum not initialized")]
    NotInitialized,
    #[error("first fix is not a valid fix")]
    InvalidFix,
    #[error("point projected in zone {got}{got_h:?}, datum is zone {want}{want_h:?}")]
    ZoneMismatch {
        got: u8,
        got_h: Hemisphere,
        want: u8,
        want_h: Hemisphere,
    },
    #[error("non-finite orientation")]
    NonFinite,
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = a - TAU * ((a + PI) / TAU).floor();
    // floor puts exact odd multiples of π at -π; the interval is closed at +π.
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

/// ZYX (yaw, pitch, roll) rotation matrix.
pub fn rotation_zyx(roll: f64, pitch: f64, yaw: f64) -> Matrix3<f64> {
    Rotation3::from_euler_angles(roll, pitch, yaw).into_inner()
}

/// Session anchor: first fix plus initial orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Datum {
    pub utm0: UtmCoord,
    pub roll0: f64,
    pub pitch0: f64,
    pub yaw0: f64,
    pub zone: u8,
}

impl Datum {
    pub fn hemisphere(&self) -> Hemisphere {
        self.utm0.hemisphere
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_zyx(self.roll0, self.pitch0, self.yaw0)
    }

    /// Forward transform `T`: odometry frame -> UTM.
    pub fn odom_to_utm(&self, q: &Vector3<f64>) -> UtmCoord {
        let p = self.rotation() * q + self.origin();
        UtmCoord::new(p.x, p.y, p.z, self.zone, self.hemisphere())
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::new(self.utm0.easting, self.utm0.northing, self.utm0.altitude)
    }
}

/// Holds the datum for a session; it can be set exactly once.
#[derive(Debug, Clone, Default)]
pub struct DatumSlot {
    datum: Option<Datum>,
}

impl DatumSlot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> Option<&Datum> {
        self.datum.as_ref()
    }

    pub fn is_set(&self) -> bool {
        self.datum.is_some()
    }

    /// Records the datum. A second call is rejected.
    pub fn init(&mut self, first_fix: UtmCoord, orientation: (f64, f64, f64)) -> Result<&Datum, FrameError> {
        if self.datum.is_some() {
            return Err(FrameError::AlreadyInitialized);
        }
        let d = init_datum(first_fix, orientation)?;
        Ok(self.datum.insert(d))
    }
}

/// Builds a datum from the first fix and the initial (roll, pitch, yaw).
pub fn init_datum(first_fix: UtmCoord, orientation: (f64, f64, f64)) -> Result<Datum, FrameError> {
    let (roll, pitch, yaw) = orientation;
    if !(roll.is_finite() && pitch.is_finite() && yaw.is_finite()) {
        return Err(FrameError::NonFinite);
    }
    if !(first_fix.easting.is_finite() && first_fix.northing.is_finite() && first_fix.altitude.is_finite()) {
        return Err(FrameError::InvalidFix);
    }
    Ok(Datum {
        utm0: first_fix,
        roll0: wrap_angle(roll),
        pitch0: wrap_angle(pitch),
        yaw0: wrap_angle(yaw),
        zone: first_fix.zone,
    })
}

/// A rigid transform `p ↦ rotation·p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// `T⁻¹` for a datum, bound to the datum's zone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtmToOdom {
    pub t_inv: RigidTransform,
    origin: Vector3<f64>,
    zone: u8,
    hemisphere: Hemisphere,
}

impl UtmToOdom {
    pub fn zone(&self) -> u8 {
        self.zone
    }

    pub fn hemisphere(&self) -> Hemisphere {
        self.hemisphere
    }

    /// Rotates a covariance expressed on UTM axes onto odometry axes.
    pub fn rotate_covariance(&self, cov: &Matrix3<f64>) -> Matrix3<f64> {
        let r = self.t_inv.rotation;
        r * cov * r.transpose()
    }
}

/// Builds `T⁻¹` from the datum.
pub fn build_utm_to_odom(datum: &Datum) -> UtmToOdom {
    let forward = RigidTransform {
        rotation: datum.rotation(),
        translation: datum.origin(),
    };
    UtmToOdom {
        t_inv: forward.inverse(),
        origin: datum.origin(),
        zone: datum.zone,
        hemisphere: datum.hemisphere(),
    }
}

/// Maps a UTM point into the odometry frame.
pub fn utm_to_odom(tf: &UtmToOdom, p: &UtmCoord) -> Result<Vector3<f64>, FrameError> {
    if p.zone != tf.zone || p.hemisphere != tf.hemisphere {
        return Err(FrameError::ZoneMismatch {
            got: p.zone,
            got_h: p.hemisphere,
            want: tf.zone,
            want_h: tf.hemisphere,
        });
    }
    // Same as t_inv.apply(p), but subtracting the anchor before rotating keeps
    // the ~1e6 m UTM magnitudes out of the rounding.
    let d = Vector3::new(
        p.easting - tf.origin.x,
        p.northing - tf.origin.y,
        p.altitude - tf.origin.z,
    );
    Ok(tf.t_inv.rotation * d)
}
