//! Python bindings: projection, the 15-state filter, the per-axis gate,
//! scenario simulation, the fusion pipeline and trajectory metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, Vector3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use geofuse::cli::{fuse_records, RunConfig, StreamStats};
use geofuse::evaluation::{self, TimedPosition};
use geofuse::fusion_gate::{self, GateThresholds, UncertaintyDiag};
use geofuse::geodesy::{self, Hemisphere, UtmCoord};
use geofuse::pipeline::records::{read_log, write_log, SensorRecord};
use geofuse::pipeline::trajectory::write_trajectory;
use geofuse::state_estimator::{
    Ekf as CoreEkf, EkfConfig, Measurement, MeasurementSource, StateMask, StateVector15, STATE_DIM,
};

/// `(x, y, z)`.
type Triple = (f64, f64, f64);
/// `(t, x, y, z)`.
type Stamped = (f64, f64, f64, f64);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn hemisphere_from(s: &str) -> PyResult<Hemisphere> {
    match s {
        "N" | "north" => Ok(Hemisphere::North),
        "S" | "south" => Ok(Hemisphere::South),
        other => Err(PyValueError::new_err(format!(
            "hemisphere must be 'N' or 'S', got '{other}'"
        ))),
    }
}

fn hemisphere_str(h: Hemisphere) -> &'static str {
    match h {
        Hemisphere::North => "N",
        Hemisphere::South => "S",
    }
}

fn thresholds(t: Triple) -> PyResult<GateThresholds> {
    GateThresholds::new(t.0, t.1, t.2).map_err(value_err)
}

fn track(points: Vec<Stamped>) -> Vec<TimedPosition> {
    points
        .into_iter()
        .map(|(t, x, y, z)| (t, Vector3::new(x, y, z)))
        .collect()
}

fn untrack(points: &[TimedPosition]) -> Vec<Stamped> {
    points.iter().map(|(t, p)| (*t, p.x, p.y, p.z)).collect()
}

/// Projects latitude/longitude (degrees) to UTM. Returns
/// `(easting, northing, altitude, zone, hemisphere)`.
#[pyfunction]
#[pyo3(signature = (latitude, longitude, altitude = 0.0, zone = None))]
fn project(
    latitude: f64,
    longitude: f64,
    altitude: f64,
    zone: Option<u8>,
) -> PyResult<(f64, f64, f64, u8, &'static str)> {
    let u = geodesy::project(latitude, longitude, altitude, zone).map_err(value_err)?;
    Ok((u.easting, u.northing, u.altitude, u.zone, hemisphere_str(u.hemisphere)))
}

/// Inverse of `project`. Returns `(latitude, longitude, altitude)`.
#[pyfunction]
#[pyo3(signature = (easting, northing, altitude, zone, hemisphere = "N"))]
fn unproject(easting: f64, northing: f64, altitude: f64, zone: u8, hemisphere: &str) -> PyResult<Triple> {
    let c = UtmCoord::new(easting, northing, altitude, zone, hemisphere_from(hemisphere)?);
    geodesy::unproject(&c).map_err(value_err)
}

/// Per-axis gate. Returns `(position, sources)` where each source is
/// `"fusion"` or `"lio"`.
#[pyfunction]
fn gate(
    fusion: Triple,
    lio: Triple,
    uncertainty: Triple,
    thresholds_xyz: Triple,
) -> PyResult<(Triple, Vec<&'static str>)> {
    let sel = fusion_gate::gate(
        &Vector3::new(fusion.0, fusion.1, fusion.2),
        &Vector3::new(lio.0, lio.1, lio.2),
        &UncertaintyDiag::new(uncertainty.0, uncertainty.1, uncertainty.2),
        &thresholds(thresholds_xyz)?,
        None,
    );
    let p = sel.position;
    Ok(((p.x, p.y, p.z), sel.sources.iter().map(|s| s.as_str()).collect()))
}

/// Maximal runs where any axis variance exceeds its threshold, as
/// `(start, end, axes)` tuples.
#[pyfunction]
fn detect_dropout_intervals(series: Vec<Stamped>, thresholds_xyz: Triple) -> PyResult<Vec<(f64, f64, String)>> {
    let s: Vec<_> = series
        .into_iter()
        .map(|(t, x, y, z)| (t, UncertaintyDiag::new(x, y, z)))
        .collect();
    Ok(fusion_gate::detect_dropout_intervals(&s, &thresholds(thresholds_xyz)?)
        .into_iter()
        .map(|iv| (iv.start, iv.end, iv.axes_label()))
        .collect())
}

/// Root-mean-square position error after nearest-in-time association.
/// Tracks are lists of `(t, x, y, z)`.
#[pyfunction]
#[pyo3(signature = (estimate, reference, tolerance = evaluation::DEFAULT_TOLERANCE, planar = false))]
fn rmse(estimate: Vec<Stamped>, reference: Vec<Stamped>, tolerance: f64, planar: bool) -> PyResult<f64> {
    let a = evaluation::associate(&track(estimate), &track(reference), tolerance).map_err(value_err)?;
    evaluation::rmse(&a, planar).map_err(value_err)
}

/// Full evaluation report as a dict.
#[pyfunction]
#[pyo3(signature = (estimate, reference, tolerance = evaluation::DEFAULT_TOLERANCE, planar = false, loop_period = None))]
fn evaluate<'py>(
    py: Python<'py>,
    estimate: Vec<Stamped>,
    reference: Vec<Stamped>,
    tolerance: f64,
    planar: bool,
    loop_period: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let r =
        evaluation::evaluate(&track(estimate), &track(reference), tolerance, planar, loop_period).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (r.to_json(),))
}

/// The 15-state extended Kalman filter. State order is x, y, z, roll,
/// pitch, yaw, vx, vy, vz, roll rate, pitch rate, yaw rate, ax, ay, az.
#[pyclass(name = "Ekf")]
struct PyEkf {
    inner: CoreEkf,
}

#[pymethods]
impl PyEkf {
    #[new]
    #[pyo3(signature = (state = None, time = 0.0))]
    fn new(state: Option<Vec<f64>>, time: f64) -> PyResult<Self> {
        let config = EkfConfig::default();
        let mut x = StateVector15::zeros();
        if let Some(s) = state {
            if s.len() != STATE_DIM {
                return Err(PyValueError::new_err(format!("state needs {STATE_DIM} entries")));
            }
            for (i, v) in s.into_iter().enumerate() {
                x.0[i] = v;
            }
        }
        let p = config.initial_covariance;
        Ok(Self {
            inner: CoreEkf::with_state(config, x, p, time),
        })
    }

    /// Propagates the state to time `t`.
    fn predict_to(&mut self, t: f64) -> PyResult<()> {
        self.inner.predict_to(t).map_err(value_err)
    }

    /// Fuses a measurement of the state entries in `indices` with value `z`
    /// and covariance `r` (square, len(indices) wide).
    fn update(&mut self, t: f64, indices: Vec<usize>, z: Vec<f64>, r: Vec<Vec<f64>>) -> PyResult<()> {
        let n = indices.len();
        if z.len() != n || r.len() != n || r.iter().any(|row| row.len() != n) {
            return Err(PyValueError::new_err("z and r must match the number of indices"));
        }
        if indices.iter().any(|&i| i >= STATE_DIM) {
            return Err(PyValueError::new_err("state index out of range"));
        }
        let rm = DMatrix::from_fn(n, n, |i, j| r[i][j]);
        let m = Measurement::new(
            t,
            StateMask::from_indices(&indices),
            DVector::from_vec(z),
            rm,
            MeasurementSource::Gps,
        )
        .map_err(value_err)?;
        self.inner.process(&m).map(|_| ()).map_err(value_err)
    }

    #[getter]
    fn state(&self) -> Vec<f64> {
        self.inner.state().0.iter().copied().collect()
    }

    #[getter]
    fn covariance(&self) -> Vec<Vec<f64>> {
        let p = &self.inner.covariance().0;
        (0..STATE_DIM)
            .map(|i| (0..STATE_DIM).map(|j| p[(i, j)]).collect())
            .collect()
    }

    #[getter]
    fn time(&self) -> Option<f64> {
        self.inner.time()
    }
}

/// A run configuration (scenario, filter, gate, evaluation, paths).
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Built-in defaults, or the TOML file at `path`.
    #[new]
    #[pyo3(signature = (path = None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = RunConfig::load_or_default(path.as_deref()).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml(text).map_err(PyValueError::new_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.scenario.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.scenario.seed = seed;
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.scenario.duration
    }

    #[setter]
    fn set_duration(&mut self, d: f64) {
        self.inner.scenario.duration = d;
    }

    #[getter]
    fn dropout_windows(&self) -> Vec<(f64, f64)> {
        self.inner
            .scenario
            .dropout_windows
            .iter()
            .map(|w| (w[0], w[1]))
            .collect()
    }

    #[setter]
    fn set_dropout_windows(&mut self, w: Vec<(f64, f64)>) {
        self.inner.scenario.dropout_windows = w.into_iter().map(|(a, b)| [a, b]).collect();
    }

    #[getter]
    fn thresholds(&self) -> Triple {
        let t = self.inner.gate.thresholds;
        (t[0], t[1], t[2])
    }

    #[setter]
    fn set_thresholds(&mut self, t: Triple) {
        self.inner.gate.thresholds = [t.0, t.1, t.2];
    }

    #[getter]
    fn loop_period(&self) -> Option<f64> {
        self.inner.scenario.loop_period()
    }
}

/// A time-ordered sensor log.
#[pyclass(name = "SensorLog")]
struct PySensorLog {
    records: Vec<SensorRecord>,
}

impl PySensorLog {
    fn track_of(&self, pick: impl Fn(&SensorRecord) -> Option<TimedPosition>) -> Vec<Stamped> {
        let t: Vec<_> = self.records.iter().filter_map(pick).collect();
        untrack(&t)
    }
}

#[pymethods]
impl PySensorLog {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let f = File::open(&path).map_err(io_err)?;
        let records = read_log(BufReader::new(f)).map_err(value_err)?;
        Ok(Self { records })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        let f = File::create(&path).map_err(io_err)?;
        write_log(BufWriter::new(f), &self.records).map_err(io_err)
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }

    /// Record counts per stream.
    fn counts(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let s = StreamStats::of(&self.records);
        [
            ("gps", s.gps),
            ("imu", s.imu),
            ("lio", s.lio),
            ("truth", s.truth),
            ("scan", s.scan),
        ]
        .into_iter()
        .collect()
    }

    /// Truth positions `(t, x, y, z)` in the odometry frame.
    fn truth(&self) -> Vec<Stamped> {
        self.track_of(|r| match r {
            SensorRecord::Truth(t) => Some((t.timestamp, t.position)),
            _ => None,
        })
    }

    /// Raw LIO positions `(t, x, y, z)`.
    fn lio(&self) -> Vec<Stamped> {
        self.track_of(|r| match r {
            SensorRecord::Lio(l) => Some((l.timestamp, l.position)),
            _ => None,
        })
    }
}

/// Output of one fusion run.
#[pyclass(name = "FusionResult")]
struct PyFusionResult {
    out: geofuse::cli::FuseOutput,
}

#[pymethods]
impl PyFusionResult {
    /// Gated positions `(t, x, y, z)`.
    fn positions(&self) -> Vec<Stamped> {
        untrack(&self.out.fused.positions())
    }

    /// LIO positions re-expressed in the output frame.
    fn lio_positions(&self) -> Vec<Stamped> {
        self.out
            .lio
            .iter()
            .map(|p| (p.timestamp, p.position.x, p.position.y, p.position.z))
            .collect()
    }

    /// Per-pose axis sources, each a list of three `"fusion"`/`"lio"`.
    fn sources(&self) -> Vec<Vec<&'static str>> {
        self.out
            .fused
            .poses
            .iter()
            .map(|p| p.sources.iter().map(|s| s.as_str()).collect())
            .collect()
    }

    /// Per-pose gate variances `(t, var_x, var_y, var_z)`.
    fn uncertainty(&self) -> Vec<Stamped> {
        self.out
            .fused
            .uncertainty_series()
            .into_iter()
            .map(|(t, u)| (t, u.var_x, u.var_y, u.var_z))
            .collect()
    }

    #[getter]
    fn dropout_intervals(&self) -> Vec<(f64, f64, String)> {
        self.out
            .fused
            .dropout_intervals
            .iter()
            .map(|iv| (iv.start, iv.end, iv.axes_label()))
            .collect()
    }

    #[getter]
    fn switch_count(&self) -> usize {
        self.out.fused.switches.len()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.out.fused.warnings.clone()
    }

    #[getter]
    fn map_dispersion(&self) -> Option<f64> {
        self.out.report.map_dispersion
    }

    fn report(&self) -> String {
        self.out.report.to_text()
    }

    fn write_trajectory(&self, path: PathBuf) -> PyResult<()> {
        let f = File::create(&path).map_err(io_err)?;
        write_trajectory(BufWriter::new(f), &self.out.fused.poses).map_err(io_err)
    }
}

/// Simulates the configured scenario.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn simulate(config: Option<PyConfig>) -> PyResult<PySensorLog> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let run = geofuse::simulator::simulate(&cfg.scenario).map_err(value_err)?;
    Ok(PySensorLog { records: run.records() })
}

/// Runs the fusion pipeline (filter, gate, map) over a log.
#[pyfunction]
#[pyo3(signature = (log, config = None))]
fn fuse(py: Python<'_>, log: &PySensorLog, config: Option<PyConfig>) -> PyResult<PyFusionResult> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    let out = py
        .detach(|| fuse_records(&log.records, &cfg, "python"))
        .map_err(value_err)?;
    Ok(PyFusionResult { out })
}

#[pymodule(name = "geofuse")]
fn geofuse_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(unproject, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(detect_dropout_intervals, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_class::<PyEkf>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PySensorLog>()?;
    m.add_class::<PyFusionResult>()?;
    Ok(())
}
