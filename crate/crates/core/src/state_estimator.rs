//! 15-state extended Kalman filter.
//!
//! State layout (odometry frame for pose, body frame for twist and
//! acceleration):
//!
//! | index | state |
//! |-------|-------|
//! | 0..3  | X, Y, Z |
//! | 3..6  | roll, pitch, yaw |
//! | 6..9  | X′, Y′, Z′ (body) |
//! | 9..12 | roll′, pitch′, yaw′ (body rates) |
//! | 12..15| X″, Y″, Z″ (body) |
//!
//! Prediction uses a constant-acceleration kinematic model with Euler-angle
//! orientation integration; `P̂ = F·P·Fᵀ + Q·dt`. Correction selects the
//! observed states with a boolean mask and updates the covariance in Joseph
//! form, `P = (I−KH)·P̂·(I−KH)ᵀ + K·R·Kᵀ`, with the gain
//! `K = P̂·Hᵀ·(H·P̂·Hᵀ + R)⁻¹`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame_transform::{rotation_zyx, wrap_angle};

pub const STATE_DIM: usize = 15;

pub const X: usize = 0;
pub const Y: usize = 1;
pub const Z: usize = 2;
pub const ROLL: usize = 3;
pub const PITCH: usize = 4;
pub const YAW: usize = 5;
pub const VX: usize = 6;
pub const VY: usize = 7;
pub const VZ: usize = 8;
pub const VROLL: usize = 9;
pub const VPITCH: usize = 10;
pub const VYAW: usize = 11;
pub const AX: usize = 12;
pub const AY: usize = 13;
pub const AZ: usize = 14;

pub const ANGLE_STATES: [usize; 3] = [ROLL, PITCH, YAW];

/// Smallest process-noise intensity used by [`ProcessNoise::from_diagonal_floored`].
pub const PROCESS_NOISE_FLOOR: f64 = 1e-9;

/// Largest condition number of the innovation covariance that is still inverted.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

const GIMBAL_GUARD: f64 = 1e-6;

pub type Matrix15 = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type Vector15 = SVector<f64, STATE_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("pitch {pitch} rad is within 1e-6 of ±π/2 (Euler-angle singularity)")]
    GimbalLock { pitch: f64 },
    #[error("negative time step {0}")]
    NegativeDt(f64),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("innovation covariance is numerically singular (condition {condition:e})")]
    SingularInnovation { condition: f64 },
    #[error("invalid process noise: {0}")]
    InvalidProcessNoise(String),
    #[error("non-finite state")]
    NonFinite,
}

/// The filter's tracked states.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector15(pub Vector15);

impl StateVector15 {
    pub fn zeros() -> Self {
        Self(Vector15::zeros())
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(X).into()
    }

    pub fn orientation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(ROLL).into()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(VX).into()
    }

    pub fn angular_velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(VROLL).into()
    }

    pub fn acceleration(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(AX).into()
    }

    pub fn set_position(&mut self, p: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(X).copy_from(p);
    }

    pub fn set_orientation(&mut self, rpy: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(ROLL).copy_from(rpy);
        self.wrap_angles();
    }

    pub fn set_velocity(&mut self, v: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(VX).copy_from(v);
    }

    pub fn set_angular_velocity(&mut self, w: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(VROLL).copy_from(w);
    }

    pub fn set_acceleration(&mut self, a: &Vector3<f64>) {
        self.0.fixed_rows_mut::<3>(AX).copy_from(a);
    }

    pub fn wrap_angles(&mut self) {
        for i in ANGLE_STATES {
            self.0[i] = wrap_angle(self.0[i]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Estimate error covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariance15(pub Matrix15);

impl Covariance15 {
    pub fn from_diagonal(d: &[f64; STATE_DIM]) -> Self {
        Self(Matrix15::from_diagonal(&Vector15::from_row_slice(d)))
    }

    pub fn identity() -> Self {
        Self(Matrix15::identity())
    }

    pub fn symmetrize(&mut self) {
        self.0 = (self.0 + self.0.transpose()) * 0.5;
    }

    /// Diagonal of the position block.
    pub fn position_variance(&self) -> Vector3<f64> {
        Vector3::new(self.0[(X, X)], self.0[(Y, Y)], self.0[(Z, Z)])
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.0.symmetric_eigenvalues().min()
    }
}

/// Continuous-time process noise; scaled by `dt` at prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise(Matrix15);

impl ProcessNoise {
    pub fn new(q: Matrix15) -> Result<Self, EstimatorError> {
        if !q.iter().all(|v| v.is_finite()) {
            return Err(EstimatorError::InvalidProcessNoise("non-finite entry".into()));
        }
        if (q - q.transpose()).abs().max() > 1e-12 {
            return Err(EstimatorError::InvalidProcessNoise("not symmetric".into()));
        }
        if q.symmetric_eigenvalues().min() < -1e-12 {
            return Err(EstimatorError::InvalidProcessNoise("not positive semi-definite".into()));
        }
        Ok(Self(q))
    }

    pub fn from_diagonal(d: &[f64; STATE_DIM]) -> Result<Self, EstimatorError> {
        Self::new(Matrix15::from_diagonal(&Vector15::from_row_slice(d)))
    }

    /// Diagonal noise with every entry raised to at least [`PROCESS_NOISE_FLOOR`].
    pub fn from_diagonal_floored(d: &[f64; STATE_DIM]) -> Result<Self, EstimatorError> {
        let mut d = *d;
        for v in d.iter_mut() {
            *v = v.max(PROCESS_NOISE_FLOOR);
        }
        Self::from_diagonal(&d)
    }

    pub fn zeros() -> Self {
        Self(Matrix15::zeros())
    }

    pub fn matrix(&self) -> &Matrix15 {
        &self.0
    }
}

/// Selects which of the 15 states a measurement observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateMask(pub [bool; STATE_DIM]);

impl StateMask {
    pub fn from_indices(idx: &[usize]) -> Self {
        let mut m = [false; STATE_DIM];
        for &i in idx {
            m[i] = true;
        }
        Self(m)
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..STATE_DIM).filter(|&i| self.0[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Selection matrix H (rows in ascending state order).
    pub fn selection_matrix(&self) -> DMatrix<f64> {
        let idx = self.indices();
        let mut h = DMatrix::zeros(idx.len(), STATE_DIM);
        for (row, &col) in idx.iter().enumerate() {
            h[(row, col)] = 1.0;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementSource {
    Imu,
    Gps,
    Lio,
}

/// Masked observation of a subset of the states. `z` and `r` follow the
/// ascending order of the set mask bits.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub timestamp: f64,
    pub mask: StateMask,
    pub z: DVector<f64>,
    pub r: DMatrix<f64>,
    pub source: MeasurementSource,
}

impl Measurement {
    pub fn new(
        timestamp: f64,
        mask: StateMask,
        z: DVector<f64>,
        r: DMatrix<f64>,
        source: MeasurementSource,
    ) -> Result<Self, EstimatorError> {
        let n = mask.count();
        let bad = |s: &str| Err(EstimatorError::InvalidMeasurement(s.to_string()));
        if n == 0 {
            return bad("empty mask");
        }
        if z.len() != n || r.nrows() != n || r.ncols() != n {
            return bad("dimension mismatch between mask, z and R");
        }
        if !timestamp.is_finite() || !z.iter().chain(r.iter()).all(|v| v.is_finite()) {
            return bad("non-finite entry");
        }
        if (&r - r.transpose()).abs().max() > 1e-9 * r.abs().max().max(1.0) {
            return bad("R not symmetric");
        }
        if r.diagonal().iter().any(|&d| d <= 0.0) {
            return bad("R diagonal must be strictly positive");
        }
        Ok(Self {
            timestamp,
            mask,
            z,
            r,
            source,
        })
    }
}

/// One IMU reading. Orientation is roll/pitch/yaw; `linear_acceleration` is
/// body-frame specific force with gravity already removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub timestamp: f64,
    pub orientation: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub linear_acceleration: Vector3<f64>,
    pub orientation_covariance: Matrix3<f64>,
    pub angular_velocity_covariance: Matrix3<f64>,
    pub linear_acceleration_covariance: Matrix3<f64>,
}

impl ImuSample {
    /// Sample at rest with the given isotropic variances.
    pub fn at_rest(timestamp: f64, var_orientation: f64, var_rate: f64, var_accel: f64) -> Self {
        Self {
            timestamp,
            orientation: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
            linear_acceleration: Vector3::zeros(),
            orientation_covariance: Matrix3::identity() * var_orientation,
            angular_velocity_covariance: Matrix3::identity() * var_rate,
            linear_acceleration_covariance: Matrix3::identity() * var_accel,
        }
    }
}

/// Position-only measurement from GPS odometry. Orientation and twist are
/// simply left out of the mask.
pub fn make_gps_measurement(p_odom: &Vector3<f64>, cov3: &Matrix3<f64>, t: f64) -> Result<Measurement, EstimatorError> {
    if !p_odom.iter().chain(cov3.iter()).all(|v| v.is_finite()) {
        return Err(EstimatorError::InvalidMeasurement("non-finite GPS entry".into()));
    }
    Measurement::new(
        t,
        StateMask::from_indices(&[X, Y, Z]),
        DVector::from_column_slice(p_odom.as_slice()),
        DMatrix::from_column_slice(3, 3, cov3.as_slice()),
        MeasurementSource::Gps,
    )
}

/// IMU measurement over orientation, body rates and body acceleration.
pub fn make_imu_measurement(s: &ImuSample) -> Result<Measurement, EstimatorError> {
    let mask = StateMask::from_indices(&[ROLL, PITCH, YAW, VROLL, VPITCH, VYAW, AX, AY, AZ]);
    let mut z = DVector::zeros(9);
    z.rows_mut(0, 3).copy_from(&s.orientation);
    z.rows_mut(3, 3).copy_from(&s.angular_velocity);
    z.rows_mut(6, 3).copy_from(&s.linear_acceleration);
    let mut r = DMatrix::zeros(9, 9);
    r.view_mut((0, 0), (3, 3)).copy_from(&s.orientation_covariance);
    r.view_mut((3, 3), (3, 3)).copy_from(&s.angular_velocity_covariance);
    r.view_mut((6, 6), (3, 3)).copy_from(&s.linear_acceleration_covariance);
    if !z.iter().chain(r.iter()).all(|v| v.is_finite()) {
        return Err(EstimatorError::InvalidMeasurement("non-finite IMU entry".into()));
    }
    for i in 0..3 {
        z[i] = wrap_angle(z[i]);
    }
    Measurement::new(s.timestamp, mask, z, r, MeasurementSource::Imu)
}

/// Maps body rates to Euler-angle rates.
fn euler_rate_matrix(roll: f64, pitch: f64) -> Matrix3<f64> {
    let (sr, cr) = roll.sin_cos();
    let tp = pitch.tan();
    let secp = 1.0 / pitch.cos();
    Matrix3::new(1.0, sr * tp, cr * tp, 0.0, cr, -sr, 0.0, sr * secp, cr * secp)
}

fn check_gimbal(x: &StateVector15) -> Result<(), EstimatorError> {
    let pitch = x.0[PITCH];
    if pitch.cos().abs() < GIMBAL_GUARD {
        return Err(EstimatorError::GimbalLock { pitch });
    }
    Ok(())
}

/// Constant-acceleration kinematics over `dt`.
pub fn motion_model(x: &StateVector15, dt: f64) -> Result<StateVector15, EstimatorError> {
    if dt < 0.0 {
        return Err(EstimatorError::NegativeDt(dt));
    }
    check_gimbal(x)?;
    let (roll, pitch, yaw) = (x.0[ROLL], x.0[PITCH], x.0[YAW]);
    let v = x.velocity();
    let a = x.acceleration();
    let w = x.angular_velocity();

    let body_step = v * dt + a * (0.5 * dt * dt);
    let mut out = *x;
    out.set_position(&(x.position() + rotation_zyx(roll, pitch, yaw) * body_step));
    let rates = euler_rate_matrix(roll, pitch) * w;
    for (k, i) in ANGLE_STATES.iter().enumerate() {
        out.0[*i] = wrap_angle(x.0[*i] + rates[k] * dt);
    }
    out.set_velocity(&(v + a * dt));
    Ok(out)
}

fn drx(r: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = r.sin_cos();
    (
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
    )
}

fn dry(p: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = p.sin_cos();
    (
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
    )
}

fn drz(y: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = y.sin_cos();
    (
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    )
}

/// Analytic Jacobian of [`motion_model`] with respect to the state.
pub fn motion_jacobian(x: &StateVector15, dt: f64) -> Result<Matrix15, EstimatorError> {
    if dt < 0.0 {
        return Err(EstimatorError::NegativeDt(dt));
    }
    check_gimbal(x)?;
    let (roll, pitch, yaw) = (x.0[ROLL], x.0[PITCH], x.0[YAW]);
    let v = x.velocity();
    let a = x.acceleration();
    let w = x.angular_velocity();
    let half_dt2 = 0.5 * dt * dt;
    let body_step = v * dt + a * half_dt2;

    let (rx, drx) = drx(roll);
    let (ry, dry) = dry(pitch);
    let (rz, drz) = drz(yaw);
    let rot = rz * ry * rx;

    let mut f = Matrix15::identity();

    // Position rows.
    let d_roll = rz * ry * drx * body_step;
    let d_pitch = rz * dry * rx * body_step;
    let d_yaw = drz * ry * rx * body_step;
    f.fixed_view_mut::<3, 1>(X, ROLL).copy_from(&d_roll);
    f.fixed_view_mut::<3, 1>(X, PITCH).copy_from(&d_pitch);
    f.fixed_view_mut::<3, 1>(X, YAW).copy_from(&d_yaw);
    f.fixed_view_mut::<3, 3>(X, VX).copy_from(&(rot * dt));
    f.fixed_view_mut::<3, 3>(X, AX).copy_from(&(rot * half_dt2));

    // Orientation rows.
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let tp = sp / cp;
    let sec2 = 1.0 / (cp * cp);
    let (w2, w3) = (w.y, w.z);
    let de_droll = Vector3::new(
        cr * tp * w2 - sr * tp * w3,
        -sr * w2 - cr * w3,
        (cr * w2 - sr * w3) / cp,
    );
    let de_dpitch = Vector3::new((sr * w2 + cr * w3) * sec2, 0.0, (sr * w2 + cr * w3) * sp * sec2);
    for k in 0..3 {
        f[(ROLL + k, ROLL)] += de_droll[k] * dt;
        f[(ROLL + k, PITCH)] += de_dpitch[k] * dt;
    }
    f.fixed_view_mut::<3, 3>(ROLL, VROLL)
        .copy_from(&(euler_rate_matrix(roll, pitch) * dt));

    // Velocity rows.
    f.fixed_view_mut::<3, 3>(VX, AX).copy_from(&(Matrix3::identity() * dt));
    Ok(f)
}

/// Prediction step.
pub fn predict(
    x: &StateVector15,
    p: &Covariance15,
    q: &ProcessNoise,
    dt: f64,
) -> Result<(StateVector15, Covariance15), EstimatorError> {
    let xp = motion_model(x, dt)?;
    let f = motion_jacobian(x, dt)?;
    let mut pp = Covariance15(f * p.0 * f.transpose() + q.0 * dt);
    pp.symmetrize();
    Ok((xp, pp))
}

/// Correction step. On a singular innovation covariance the error is
/// returned and the caller keeps its prior.
pub fn correct(
    x: &StateVector15,
    p: &Covariance15,
    m: &Measurement,
) -> Result<(StateVector15, Covariance15), EstimatorError> {
    let idx = m.mask.indices();
    let n = idx.len();
    if m.z.len() != n || m.r.nrows() != n {
        return Err(EstimatorError::InvalidMeasurement("dimension mismatch".into()));
    }
    let h = m.mask.selection_matrix();
    let p_dyn = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, p.0.as_slice());

    // P̂Hᵀ and HP̂Hᵀ by index selection.
    let pht = p_dyn.select_columns(&idx);
    let s = pht.select_rows(&idx) + &m.r;
    let sv = s.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > MAX_INNOVATION_CONDITION {
        return Err(EstimatorError::SingularInnovation { condition });
    }
    let s_inv = s
        .try_inverse()
        .ok_or(EstimatorError::SingularInnovation { condition })?;
    let k = &pht * s_inv;

    let mut innovation = DVector::zeros(n);
    for (row, &i) in idx.iter().enumerate() {
        let mut r = m.z[row] - x.0[i];
        if ANGLE_STATES.contains(&i) {
            r = wrap_angle(r);
        }
        innovation[row] = r;
    }

    let dx = &k * innovation;
    let mut xn = *x;
    for i in 0..STATE_DIM {
        xn.0[i] += dx[i];
    }
    xn.wrap_angles();

    let ikh = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM) - &k * &h;
    let joseph = &ikh * &p_dyn * ikh.transpose() + &k * &m.r * k.transpose();
    let mut pn = Covariance15(Matrix15::from_column_slice(joseph.as_slice()));
    pn.symmetrize();
    if !xn.is_finite() {
        return Err(EstimatorError::NonFinite);
    }
    Ok((xn, pn))
}

/// Filter tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfConfig {
    pub process_noise: ProcessNoise,
    pub initial_covariance: Covariance15,
    /// Measurements older than the filter time by more than this are dropped.
    pub out_of_order_tolerance: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            process_noise: ProcessNoise::from_diagonal_floored(&DEFAULT_PROCESS_NOISE)
                .expect("default process noise is valid"),
            initial_covariance: Covariance15::from_diagonal(&DEFAULT_INITIAL_COVARIANCE),
            out_of_order_tolerance: 0.1,
        }
    }
}

/// Per unit time: position, orientation, velocity, body rates, acceleration.
pub const DEFAULT_PROCESS_NOISE: [f64; STATE_DIM] = [
    1e-3, 1e-3, 1e-3, //
    1e-4, 1e-4, 1e-4, //
    2e-2, 2e-2, 2e-2, //
    1e-2, 1e-2, 1e-2, //
    5e-1, 5e-1, 5e-1,
];

pub const DEFAULT_INITIAL_COVARIANCE: [f64; STATE_DIM] = [
    1.0, 1.0, 1.0, //
    0.1, 0.1, 0.1, //
    1.0, 1.0, 1.0, //
    0.1, 0.1, 0.1, //
    1.0, 1.0, 1.0,
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounters {
    pub predictions: u64,
    pub corrections: u64,
    pub dropped_out_of_order: u64,
    pub skipped_singular: u64,
    pub rejected_invalid: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    DroppedOutOfOrder,
    SkippedSingular,
}

/// Sequential filter: predicts to each measurement's time, then corrects.
#[derive(Debug, Clone)]
pub struct Ekf {
    state: StateVector15,
    covariance: Covariance15,
    config: EkfConfig,
    time: Option<f64>,
    counters: FilterCounters,
}

impl Ekf {
    pub fn new(config: EkfConfig) -> Self {
        Self {
            state: StateVector15::zeros(),
            covariance: config.initial_covariance,
            config,
            time: None,
            counters: FilterCounters::default(),
        }
    }

    pub fn with_state(config: EkfConfig, state: StateVector15, covariance: Covariance15, time: f64) -> Self {
        Self {
            state,
            covariance,
            config,
            time: Some(time),
            counters: FilterCounters::default(),
        }
    }

    pub fn state(&self) -> &StateVector15 {
        &self.state
    }

    pub fn covariance(&self) -> &Covariance15 {
        &self.covariance
    }

    pub fn time(&self) -> Option<f64> {
        self.time
    }

    pub fn counters(&self) -> FilterCounters {
        self.counters
    }

    pub fn config(&self) -> &EkfConfig {
        &self.config
    }

    /// Overwrites the position states and their covariance block.
    pub fn reset_position(&mut self, p: &Vector3<f64>, var: f64) {
        self.state.set_position(p);
        for i in X..=Z {
            for j in 0..STATE_DIM {
                self.covariance.0[(i, j)] = 0.0;
                self.covariance.0[(j, i)] = 0.0;
            }
            self.covariance.0[(i, i)] = var;
        }
    }

    /// Predicts forward to `t`. Times at or before the filter time are a no-op.
    pub fn predict_to(&mut self, t: f64) -> Result<(), EstimatorError> {
        let Some(now) = self.time else {
            self.time = Some(t);
            return Ok(());
        };
        if t <= now {
            return Ok(());
        }
        let (x, p) = predict(&self.state, &self.covariance, &self.config.process_noise, t - now)?;
        self.state = x;
        self.covariance = p;
        self.time = Some(t);
        self.counters.predictions += 1;
        Ok(())
    }

    /// Predicts to the measurement time and applies the correction.
    pub fn process(&mut self, m: &Measurement) -> Result<UpdateOutcome, EstimatorError> {
        if let Some(now) = self.time {
            if m.timestamp < now - self.config.out_of_order_tolerance {
                self.counters.dropped_out_of_order += 1;
                log::debug!(
                    "dropping {:?} measurement at {} (filter at {})",
                    m.source,
                    m.timestamp,
                    now
                );
                return Ok(UpdateOutcome::DroppedOutOfOrder);
            }
        }
        self.predict_to(m.timestamp)?;
        match correct(&self.state, &self.covariance, m) {
            Ok((x, p)) => {
                self.state = x;
                self.covariance = p;
                self.counters.corrections += 1;
                Ok(UpdateOutcome::Applied)
            }
            Err(EstimatorError::SingularInnovation { condition }) => {
                self.counters.skipped_singular += 1;
                log::warn!(
                    "skipping {:?} update at {}: innovation condition {condition:e}",
                    m.source,
                    m.timestamp
                );
                Ok(UpdateOutcome::SkippedSingular)
            }
            Err(e) => Err(e),
        }
    }

    pub fn note_rejected(&mut self) {
        self.counters.rejected_invalid += 1;
    }
}
