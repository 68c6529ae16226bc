//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the filter maths it is used to check.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use geofuse::state_estimator::{
    Covariance15, Ekf, EkfConfig, Measurement, MeasurementSource, ProcessNoise, StateMask, StateVector15, STATE_DIM,
    VX, X,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn repo_root() -> PathBuf {
    manifest_dir().join("../..")
}

/// One row of the frozen projection fixture.
#[derive(Debug, Clone)]
pub struct UtmOracleRow {
    pub grid: bool,
    pub zone: u8,
    pub south: bool,
    pub lat: f64,
    pub lon: f64,
    pub easting: f64,
    pub northing: f64,
}

pub fn load_utm_oracle() -> Vec<UtmOracleRow> {
    let path = manifest_dir().join("tests/fixtures/utm_oracle.csv");
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            let f = |i: usize| c[i].parse::<f64>().unwrap();
            UtmOracleRow {
                grid: c[0] == "grid",
                zone: c[1].parse().unwrap(),
                south: c[2] == "S",
                lat: f(3),
                lon: f(4),
                easting: f(5),
                northing: f(6),
            }
        })
        .collect()
}

/// Plain two-state constant-velocity Kalman filter written out by hand.
#[derive(Debug, Clone, Copy)]
pub struct ScalarCvFilter {
    pub x: [f64; 2],
    pub p: [[f64; 2]; 2],
    /// Continuous noise intensities for position and velocity.
    pub q: [f64; 2],
    pub r: f64,
}

impl ScalarCvFilter {
    pub fn predict(&mut self, dt: f64) {
        let [x, v] = self.x;
        self.x = [x + v * dt, v];
        let [[p00, p01], [p10, p11]] = self.p;
        // F P Fᵀ with F = [[1, dt], [0, 1]].
        let a00 = p00 + dt * (p10 + p01) + dt * dt * p11;
        let a01 = p01 + dt * p11;
        let a10 = p10 + dt * p11;
        let a11 = p11;
        self.p = [[a00 + self.q[0] * dt, a01], [a10, a11 + self.q[1] * dt]];
    }

    pub fn update(&mut self, z: f64) {
        let [[p00, p01], [p10, p11]] = self.p;
        let s = p00 + self.r;
        let k = [p00 / s, p10 / s];
        let y = z - self.x[0];
        self.x = [self.x[0] + k[0] * y, self.x[1] + k[1] * y];
        // Simple form (I − K H) P.
        self.p = [
            [(1.0 - k[0]) * p00, (1.0 - k[0]) * p01],
            [p10 - k[1] * p00, p11 - k[1] * p01],
        ];
    }
}

/// The 15-state filter restricted to x / vx: every other state starts
/// exactly known with zero process noise, so the pair evolves as a linear
/// constant-velocity system.
pub fn linear_ekf(x0: [f64; 2], p0: [[f64; 2]; 2], q: [f64; 2]) -> Ekf {
    let mut qd = [0.0; STATE_DIM];
    qd[X] = q[0];
    qd[VX] = q[1];
    let mut state = StateVector15::zeros();
    state.0[X] = x0[0];
    state.0[VX] = x0[1];
    let mut p = Covariance15::from_diagonal(&[0.0; STATE_DIM]);
    p.0[(X, X)] = p0[0][0];
    p.0[(X, VX)] = p0[0][1];
    p.0[(VX, X)] = p0[1][0];
    p.0[(VX, VX)] = p0[1][1];
    let config = EkfConfig {
        process_noise: ProcessNoise::from_diagonal(&qd).unwrap(),
        initial_covariance: p,
        out_of_order_tolerance: 0.1,
    };
    Ekf::with_state(config, state, p, 0.0)
}

pub fn x_measurement(t: f64, z: f64, r: f64) -> Measurement {
    Measurement::new(
        t,
        StateMask::from_indices(&[X]),
        DVector::from_element(1, z),
        DMatrix::from_element(1, 1, r),
        MeasurementSource::Gps,
    )
    .unwrap()
}

/// Simulated truth and measurements of the x / vx system with discrete
/// process noise `q·dt`.
pub struct CvRun {
    pub truth: Vec<[f64; 2]>,
    pub z: Vec<f64>,
}

pub fn simulate_cv(seed: u64, steps: usize, dt: f64, x0: [f64; 2], q: [f64; 2], r: f64) -> CvRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wx = Normal::new(0.0, (q[0] * dt).sqrt()).unwrap();
    let wv = Normal::new(0.0, (q[1] * dt).sqrt()).unwrap();
    let vz = Normal::new(0.0, r.sqrt()).unwrap();
    let mut s = x0;
    let mut truth = Vec::with_capacity(steps);
    let mut z = Vec::with_capacity(steps);
    for _ in 0..steps {
        s = [s[0] + s[1] * dt + wx.sample(&mut rng), s[1] + wv.sample(&mut rng)];
        truth.push(s);
        z.push(s[0] + vz.sample(&mut rng));
    }
    CvRun { truth, z }
}

/// Random symmetric positive-definite n×n matrix with entries of order one.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
    (&m + m.transpose()) * 0.5
}

/// Central finite-difference Jacobian of `f` at `x`.
pub fn fd_jacobian(f: impl Fn(&[f64; STATE_DIM]) -> [f64; STATE_DIM], x: &[f64; STATE_DIM], h: f64) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(STATE_DIM, STATE_DIM);
    for c in 0..STATE_DIM {
        let mut xp = *x;
        let mut xm = *x;
        xp[c] += h;
        xm[c] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        for r in 0..STATE_DIM {
            j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

pub fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
