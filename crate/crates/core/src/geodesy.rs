//! WGS-84 geodetic <-> UTM conversion.
//!
//! Forward and inverse transverse Mercator use the Krüger series in the third
//! flattening `n`, truncated at sixth order. Inside a zone the truncation error
//! is a few nanometres, far below anything an RTK receiver can resolve.
//!
//! Altitude is treated as ellipsoidal height and passed through untouched; no
//! geoid model is applied.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 semi-major axis, metres.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

const K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;
const FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;
/// UTM is not defined poleward of this latitude (UPS takes over).
const MAX_ABS_LATITUDE: f64 = 84.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesyError {
    #[error("latitude {0} deg outside [-90, 90]")]
    LatitudeRange(f64),
    #[error("longitude {0} deg outside [-180, 180]")]
    LongitudeRange(f64),
    #[error("latitude {0} deg outside the UTM band (|lat| < 84)")]
    OutsideUtmBand(f64),
    #[error("UTM zone {0} not in 1..=60")]
    InvalidZone(i32),
    #[error("easting {easting} / northing {northing} outside the projection domain")]
    OutsideDomain { easting: f64, northing: f64 },
    #[error("non-finite coordinate")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    North,
    South,
}

/// A single GPS fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoFix {
    pub timestamp: f64,
    /// Degrees.
    pub latitude: f64,
    /// Degrees.
    pub longitude: f64,
    /// Metres above the ellipsoid.
    pub altitude: f64,
    /// ENU position covariance, m².
    pub position_covariance: Matrix3<f64>,
    pub fix_valid: bool,
}

impl GeoFix {
    pub fn new(timestamp: f64, latitude: f64, longitude: f64, altitude: f64) -> Self {
        Self {
            timestamp,
            latitude,
            longitude,
            altitude,
            position_covariance: Matrix3::zeros(),
            fix_valid: true,
        }
    }

    pub fn validate(&self) -> Result<(), GeodesyError> {
        check_latlon(self.latitude, self.longitude)?;
        if !self.altitude.is_finite() {
            return Err(GeodesyError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmCoord {
    pub easting: f64,
    pub northing: f64,
    pub altitude: f64,
    pub zone: u8,
    pub hemisphere: Hemisphere,
}

impl UtmCoord {
    pub fn new(easting: f64, northing: f64, altitude: f64, zone: u8, hemisphere: Hemisphere) -> Self {
        Self {
            easting,
            northing,
            altitude,
            zone,
            hemisphere,
        }
    }
}

/// Central meridian of a zone, degrees.
pub fn central_meridian(zone: u8) -> f64 {
    f64::from(zone) * 6.0 - 183.0
}

/// Standard zone for a longitude (no Norway/Svalbard exceptions).
pub fn zone_for_longitude(longitude: f64) -> u8 {
    let z = ((longitude + 180.0) / 6.0).floor() as i32 + 1;
    z.clamp(1, 60) as u8
}

fn check_latlon(latitude: f64, longitude: f64) -> Result<(), GeodesyError> {
    if !latitude.is_finite() || !longitude.is_finite() {
        return Err(GeodesyError::NonFinite);
    }
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(GeodesyError::LatitudeRange(latitude));
    }
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(GeodesyError::LongitudeRange(longitude));
    }
    Ok(())
}

/// Ellipsoid-derived constants for the Krüger series.
struct Kruger {
    e: f64,
    /// Rectifying radius times k0.
    k0_a: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

impl Kruger {
    fn wgs84() -> Self {
        let f = WGS84_F;
        let n = f / (2.0 - f);
        let n2 = n * n;
        let n3 = n2 * n;
        let n4 = n3 * n;
        let n5 = n4 * n;
        let n6 = n5 * n;
        let rect = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0 + 7891.0 * n6 / 37800.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0 - 1983433.0 * n6 / 1935360.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0 + 167603.0 * n6 / 181440.0,
            49561.0 * n4 / 161280.0 - 179.0 * n5 / 168.0 + 6601661.0 * n6 / 7257600.0,
            34729.0 * n5 / 80640.0 - 3418889.0 * n6 / 1995840.0,
            212378941.0 * n6 / 319334400.0,
        ];
        let beta = [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0 + 96199.0 * n6 / 604800.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0 - 1118711.0 * n6 / 3870720.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
            4397.0 * n4 / 161280.0 - 11.0 * n5 / 504.0 - 830251.0 * n6 / 7257600.0,
            4583.0 * n5 / 161280.0 - 108847.0 * n6 / 3991680.0,
            20648693.0 * n6 / 638668800.0,
        ];
        Self {
            e: (f * (2.0 - f)).sqrt(),
            k0_a: K0 * rect,
            alpha,
            beta,
        }
    }

    /// tan(conformal latitude) from tan(geodetic latitude).
    fn tau_prime(&self, tau: f64) -> f64 {
        let tau1 = tau.hypot(1.0);
        let sig = (self.e * (self.e * tau / tau1).atanh()).sinh();
        tau * sig.hypot(1.0) - sig * tau1
    }

    /// Inverse of `tau_prime` by Newton iteration.
    fn tau_from_tau_prime(&self, taup: f64) -> f64 {
        let e2m = 1.0 - self.e * self.e;
        let mut tau = taup / e2m;
        for _ in 0..8 {
            let taupa = self.tau_prime(tau);
            let dtau = (taup - taupa) * (1.0 + e2m * tau * tau) / (e2m * tau.hypot(1.0) * taupa.hypot(1.0));
            tau += dtau;
            if dtau.abs() < 1e-15 * tau.abs().max(1.0) {
                break;
            }
        }
        tau
    }

    /// (ξ, η) on the ellipsoid scaled to the sphere, for geodetic lat and
    /// longitude difference from the central meridian (radians).
    fn forward(&self, phi: f64, dlam: f64) -> (f64, f64) {
        let taup = self.tau_prime(phi.tan());
        let xip = taup.atan2(dlam.cos());
        let etap = (dlam.sin() / taup.hypot(dlam.cos())).asinh();
        let mut xi = xip;
        let mut eta = etap;
        for (j, a) in self.alpha.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi += a * (k * xip).sin() * (k * etap).cosh();
            eta += a * (k * xip).cos() * (k * etap).sinh();
        }
        (xi, eta)
    }

    fn inverse(&self, xi: f64, eta: f64) -> (f64, f64) {
        let mut xip = xi;
        let mut etap = eta;
        for (j, b) in self.beta.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xip -= b * (k * xi).sin() * (k * eta).cosh();
            etap -= b * (k * xi).cos() * (k * eta).sinh();
        }
        let taup = xip.sin() / etap.sinh().hypot(xip.cos());
        let phi = self.tau_from_tau_prime(taup).atan();
        let dlam = etap.sinh().atan2(xip.cos());
        (phi, dlam)
    }
}

/// Projects a geodetic position into UTM.
///
/// `forced_zone` pins the projection to a given zone regardless of longitude,
/// so a session that straddles a zone boundary stays continuous.
pub fn project(
    latitude: f64,
    longitude: f64,
    altitude: f64,
    forced_zone: Option<u8>,
) -> Result<UtmCoord, GeodesyError> {
    check_latlon(latitude, longitude)?;
    if latitude.abs() >= MAX_ABS_LATITUDE {
        return Err(GeodesyError::OutsideUtmBand(latitude));
    }
    let zone = match forced_zone {
        Some(z) if (1..=60).contains(&z) => z,
        Some(z) => return Err(GeodesyError::InvalidZone(i32::from(z))),
        None => zone_for_longitude(longitude),
    };
    let mut dlon = longitude - central_meridian(zone);
    // Keep the longitude difference in (-180, 180] for forced zones near the antimeridian.
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon <= -180.0 {
        dlon += 360.0;
    }
    let k = Kruger::wgs84();
    let (xi, eta) = k.forward(latitude.to_radians(), dlon.to_radians());
    let hemisphere = if latitude >= 0.0 {
        Hemisphere::North
    } else {
        Hemisphere::South
    };
    let false_northing = match hemisphere {
        Hemisphere::North => 0.0,
        Hemisphere::South => FALSE_NORTHING_SOUTH,
    };
    Ok(UtmCoord {
        easting: FALSE_EASTING + k.k0_a * eta,
        northing: false_northing + k.k0_a * xi,
        altitude,
        zone,
        hemisphere,
    })
}

/// Projects a fix into UTM; see [`project`].
pub fn latlon_to_utm(fix: &GeoFix, forced_zone: Option<u8>) -> Result<UtmCoord, GeodesyError> {
    project(fix.latitude, fix.longitude, fix.altitude, forced_zone)
}

/// Inverse projection. Returns `(latitude, longitude, altitude)` in degrees/metres.
pub fn unproject(coord: &UtmCoord) -> Result<(f64, f64, f64), GeodesyError> {
    if !coord.easting.is_finite() || !coord.northing.is_finite() || !coord.altitude.is_finite() {
        return Err(GeodesyError::NonFinite);
    }
    if !(1..=60).contains(&coord.zone) {
        return Err(GeodesyError::InvalidZone(i32::from(coord.zone)));
    }
    let outside = || GeodesyError::OutsideDomain {
        easting: coord.easting,
        northing: coord.northing,
    };
    if !(0.0..=1_000_000.0).contains(&coord.easting) || !(0.0..=FALSE_NORTHING_SOUTH).contains(&coord.northing) {
        return Err(outside());
    }
    let k = Kruger::wgs84();
    let y = match coord.hemisphere {
        Hemisphere::North => coord.northing,
        Hemisphere::South => coord.northing - FALSE_NORTHING_SOUTH,
    };
    let (phi, dlam) = k.inverse(y / k.k0_a, (coord.easting - FALSE_EASTING) / k.k0_a);
    let lat = phi.to_degrees();
    let mut lon = central_meridian(coord.zone) + dlam.to_degrees();
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    if lat.abs() >= MAX_ABS_LATITUDE {
        return Err(outside());
    }
    Ok((lat, lon, coord.altitude))
}

/// Inverse projection to a fix with the given timestamp; covariance is left zero.
pub fn utm_to_latlon(coord: &UtmCoord, timestamp: f64) -> Result<GeoFix, GeodesyError> {
    let (lat, lon, alt) = unproject(coord)?;
    Ok(GeoFix::new(timestamp, lat, lon, alt))
}
