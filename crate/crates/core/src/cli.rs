//! Command implementations behind the `geofuse` binary.
//!
//! Every command reads one TOML run configuration, applies flag overrides,
//! and reports failures as [`CliError`], whose [`CliError::exit_code`] is the
//! process exit status.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{self, EvalError, EvalReport, TimedPosition, DEFAULT_TOLERANCE};
use crate::fusion_gate::{DropoutInterval, GateThresholds, GatedPose};
use crate::pipeline::map::{assemble_map, map_dispersion, voxel_downsample, write_map};
use crate::pipeline::records::{read_log, write_log, RecordError, Scan, SensorRecord};
use crate::pipeline::trajectory::{poses_from_positions, read_trajectory, write_trajectory};
use crate::pipeline::{run, FusedTrajectory, PipelineConfig, PipelineCounters, SwitchEvent, UncertaintySource};
use crate::simulator::{simulate, Scenario};
use crate::state_estimator::{
    Covariance15, EkfConfig, ProcessNoise, DEFAULT_INITIAL_COVARIANCE, DEFAULT_PROCESS_NOISE, STATE_DIM,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation undefined: {0}")]
    EvalUndefined(String),
}

impl CliError {
    /// 2 for I/O, 3 for parse and configuration errors, 4 when a metric is undefined.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 2,
            CliError::Parse { .. } | CliError::Config(_) => 3,
            CliError::EvalUndefined(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn record_err(path: &Path, e: RecordError) -> CliError {
    match e {
        RecordError::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        RecordError::Parse { .. } => CliError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Continuous-time process noise diagonal, per second.
    pub process_noise: Vec<f64>,
    pub initial_covariance: Vec<f64>,
    pub out_of_order_tolerance: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            process_noise: DEFAULT_PROCESS_NOISE.to_vec(),
            initial_covariance: DEFAULT_INITIAL_COVARIANCE.to_vec(),
            out_of_order_tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    /// Per-axis variance thresholds, m².
    pub thresholds: [f64; 3],
    pub hysteresis_fraction: f64,
    pub uncertainty_source: UncertaintySource,
    pub enabled: bool,
    pub reanchor_on_dropout: bool,
    pub retro_anchor: bool,
    pub gps_timeout: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            thresholds: p.thresholds.as_array(),
            hysteresis_fraction: p.thresholds.hysteresis_fraction,
            uncertainty_source: p.uncertainty_source,
            enabled: p.gate_enabled,
            reanchor_on_dropout: p.reanchor_on_dropout,
            retro_anchor: p.retro_anchor,
            gps_timeout: p.gps_timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tolerance: f64,
    pub planar: bool,
    /// Rigidly fit the estimate to the reference before scoring.
    pub align: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            planar: false,
            align: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    /// Voxel leaf for the written map, m; 0 writes every point.
    pub voxel_leaf: f64,
}

/// Output and input locations. Relative paths resolve against the current
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub log: PathBuf,
    pub trajectory: PathBuf,
    pub lio_trajectory: PathBuf,
    pub truth_trajectory: PathBuf,
    pub map: PathBuf,
    pub report: PathBuf,
    pub plots_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            log: "out/sensors.jsonl".into(),
            trajectory: "out/fused.txt".into(),
            lio_trajectory: "out/lio.txt".into(),
            truth_trajectory: "out/truth.txt".into(),
            map: "out/map.xyz".into(),
            report: "out/report.txt".into(),
            plots_dir: "out/plots".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub filter: FilterSection,
    pub gate: GateSection,
    pub eval: EvalSection,
    pub map: MapSection,
    pub paths: PathsSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub thresholds: Option<[f64; 3]>,
    pub uncertainty_source: Option<UncertaintySource>,
    pub planar: bool,
}

fn diag15(v: &[f64], what: &str) -> Result<[f64; STATE_DIM], CliError> {
    v.try_into()
        .map_err(|_| CliError::Config(format!("{what} needs {STATE_DIM} entries, got {}", v.len())))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|message| CliError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    /// Loads `path`, or the built-in defaults when `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.scenario.seed = seed;
        }
        if let Some(th) = o.thresholds {
            self.gate.thresholds = th;
        }
        if let Some(src) = o.uncertainty_source {
            self.gate.uncertainty_source = src;
        }
        if o.planar {
            self.eval.planar = true;
        }
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        let q = ProcessNoise::from_diagonal_floored(&diag15(&self.filter.process_noise, "process_noise")?)
            .map_err(|e| cfg(&e))?;
        let p0 = diag15(&self.filter.initial_covariance, "initial_covariance")?;
        if p0.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CliError::Config("initial_covariance entries must be > 0".into()));
        }
        if self.filter.out_of_order_tolerance.is_nan() || self.filter.out_of_order_tolerance < 0.0 {
            return Err(CliError::Config("out_of_order_tolerance must be >= 0".into()));
        }
        if self.gate.gps_timeout.is_nan() || self.gate.gps_timeout <= 0.0 {
            return Err(CliError::Config("gps_timeout must be > 0".into()));
        }
        let [x, y, z] = self.gate.thresholds;
        let thresholds = GateThresholds::new(x, y, z)
            .and_then(|t| t.with_hysteresis(self.gate.hysteresis_fraction))
            .map_err(|e| cfg(&e))?;
        Ok(PipelineConfig {
            ekf: EkfConfig {
                process_noise: q,
                initial_covariance: Covariance15::from_diagonal(&p0),
                out_of_order_tolerance: self.filter.out_of_order_tolerance,
            },
            thresholds,
            uncertainty_source: self.gate.uncertainty_source,
            gate_enabled: self.gate.enabled,
            reanchor_on_dropout: self.gate.reanchor_on_dropout,
            retro_anchor: self.gate.retro_anchor,
            gps_timeout: self.gate.gps_timeout,
        })
    }
}

/// Parses `x,y,z`.
pub fn parse_thresholds(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|v| format!("expected three comma-separated values, got {}", v.len()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Sibling path with the extension replaced.
pub fn json_sibling(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StreamStats {
    pub gps: usize,
    pub imu: usize,
    pub lio: usize,
    pub truth: usize,
    pub scan: usize,
}

impl StreamStats {
    pub fn of(records: &[SensorRecord]) -> Self {
        let mut s = Self::default();
        for r in records {
            match r {
                SensorRecord::Gps(_) => s.gps += 1,
                SensorRecord::Imu(_) => s.imu += 1,
                SensorRecord::Lio(_) => s.lio += 1,
                SensorRecord::Truth(_) => s.truth += 1,
                SensorRecord::Scan(_) => s.scan += 1,
            }
        }
        s
    }

    pub fn total(&self) -> usize {
        self.gps + self.imu + self.lio + self.truth + self.scan
    }
}

/// Simulates the configured scenario into `paths.log` and writes the truth
/// track to `paths.truth_trajectory`.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<StreamStats, CliError> {
    let sim = simulate(&cfg.scenario).map_err(|e| CliError::Config(e.to_string()))?;
    let records = sim.records();
    let path = &cfg.paths.log;
    write_log(create(path)?, &records).map_err(|e| record_err(path, e))?;
    let truth: Vec<TimedPosition> = sim.truth.iter().map(|t| (t.timestamp, t.position)).collect();
    let tpath = &cfg.paths.truth_trajectory;
    write_trajectory(create(tpath)?, &poses_from_positions(&truth)).map_err(io_err(tpath))?;
    Ok(StreamStats::of(&records))
}

pub fn load_log(path: &Path) -> Result<Vec<SensorRecord>, CliError> {
    read_log(open(path)?).map_err(|e| record_err(path, e))
}

/// Summary written next to a fused trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuseReport {
    pub input: String,
    pub poses: usize,
    pub pre_datum_poses: usize,
    pub uncertainty_source: UncertaintySource,
    pub thresholds: [f64; 3],
    pub dropout_intervals: Vec<DropoutInterval>,
    pub switch_count: usize,
    pub max_switch_jump: f64,
    pub switches: Vec<SwitchEvent>,
    pub counters: PipelineCounters,
    pub map_points: usize,
    pub map_dispersion: Option<f64>,
    pub skipped_scans: usize,
    pub warnings: Vec<String>,
}

impl FuseReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(": ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("input", self.input.clone());
        kv("poses", self.poses.to_string());
        kv("pre_datum_poses", self.pre_datum_poses.to_string());
        kv("uncertainty_source", self.uncertainty_source.as_str().into());
        kv(
            "thresholds",
            format!("{},{},{}", self.thresholds[0], self.thresholds[1], self.thresholds[2]),
        );
        kv("dropout_interval_count", self.dropout_intervals.len().to_string());
        for (i, iv) in self.dropout_intervals.iter().enumerate() {
            kv(
                &format!("dropout_interval_{i}"),
                format!("{} {} {}", iv.start, iv.end, iv.axes_label()),
            );
        }
        kv("switch_count", self.switch_count.to_string());
        kv("max_switch_jump", self.max_switch_jump.to_string());
        for (i, e) in self.switches.iter().enumerate() {
            kv(
                &format!("switch_{i}"),
                format!(
                    "{} {} {}->{} {}",
                    e.timestamp,
                    ["x", "y", "z"][e.axis],
                    e.from.as_str(),
                    e.to.as_str(),
                    e.jump
                ),
            );
        }
        let c = &self.counters;
        kv("gps_records", c.gps_records.to_string());
        kv("imu_records", c.imu_records.to_string());
        kv("lio_records", c.lio_records.to_string());
        kv("gps_rejected", c.gps_rejected.to_string());
        kv("imu_rejected", c.imu_rejected.to_string());
        kv("lio_duplicates", c.lio_duplicates.to_string());
        kv("dropped_out_of_order", c.filter.dropped_out_of_order.to_string());
        kv("skipped_singular", c.filter.skipped_singular.to_string());
        kv("map_points", self.map_points.to_string());
        kv(
            "map_dispersion",
            self.map_dispersion.map_or_else(|| "n/a".into(), |d| d.to_string()),
        );
        kv("skipped_scans", self.skipped_scans.to_string());
        kv("warning_count", self.warnings.len().to_string());
        for (i, w) in self.warnings.iter().enumerate() {
            kv(&format!("warning_{i}"), w.clone());
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Everything one fusion run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct FuseOutput {
    pub fused: FusedTrajectory,
    pub lio: Vec<GatedPose>,
    pub map: Vec<Vector3<f64>>,
    pub report: FuseReport,
}

/// Runs fusion and map assembly on an in-memory log.
pub fn fuse_records(records: &[SensorRecord], cfg: &RunConfig, input: &str) -> Result<FuseOutput, CliError> {
    let pcfg = cfg.pipeline_config()?;
    let fused = run(records, &pcfg).map_err(|e| CliError::Parse {
        path: input.into(),
        message: e.to_string(),
    })?;
    let lio_track: Vec<TimedPosition> = records
        .iter()
        .filter_map(|r| match r {
            SensorRecord::Lio(l) => Some((l.timestamp, l.position)),
            _ => None,
        })
        .collect();
    let lio = poses_from_positions(&lio_track);
    let scans: Vec<Scan> = records
        .iter()
        .filter_map(|r| match r {
            SensorRecord::Scan(s) => Some(s.clone()),
            _ => None,
        })
        .collect();
    let assembled = assemble_map(&fused.poses, &scans);
    let dispersion = map_dispersion(&assembled);
    let points = if cfg.map.voxel_leaf > 0.0 {
        voxel_downsample(&assembled.points, cfg.map.voxel_leaf)
    } else {
        assembled.points.clone()
    };
    let report = FuseReport {
        input: input.to_string(),
        poses: fused.poses.len(),
        pre_datum_poses: fused.poses.iter().filter(|p| p.pre_datum).count(),
        uncertainty_source: pcfg.uncertainty_source,
        thresholds: pcfg.thresholds.as_array(),
        dropout_intervals: fused.dropout_intervals.clone(),
        switch_count: fused.switches.len(),
        max_switch_jump: fused.switches.iter().map(|s| s.jump).fold(0.0, f64::max),
        switches: fused.switches.clone(),
        counters: fused.counters,
        map_points: points.len(),
        map_dispersion: dispersion,
        skipped_scans: assembled.skipped_scans,
        warnings: fused.warnings.clone(),
    };
    Ok(FuseOutput {
        fused,
        lio,
        map: points,
        report,
    })
}

/// Fuses `paths.log` and writes the trajectory, LIO-only trajectory, map and
/// report (text plus a `.json` sibling).
pub fn cmd_fuse(cfg: &RunConfig) -> Result<FuseReport, CliError> {
    let p = &cfg.paths;
    let records = load_log(&p.log)?;
    let out = fuse_records(&records, cfg, &p.log.display().to_string())?;
    write_trajectory(create(&p.trajectory)?, &out.fused.poses).map_err(io_err(&p.trajectory))?;
    write_trajectory(create(&p.lio_trajectory)?, &out.lio).map_err(io_err(&p.lio_trajectory))?;
    write_map(create(&p.map)?, &out.map).map_err(io_err(&p.map))?;
    write_text(&p.report, &out.report.to_text())?;
    write_text(&json_sibling(&p.report), &(out.report.to_json() + "\n"))?;
    Ok(out.report)
}

fn first_content_line<R: BufRead>(r: R) -> std::io::Result<Option<String>> {
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            return Ok(Some(line));
        }
    }
    Ok(None)
}

/// Positions from a trajectory file, or from the truth records of a sensor
/// log (detected by a leading `{`).
pub fn load_positions(path: &Path) -> Result<Vec<TimedPosition>, CliError> {
    let is_log = first_content_line(open(path)?)
        .map_err(io_err(path))?
        .is_some_and(|l| l.trim_start().starts_with('{'));
    if is_log {
        Ok(load_log(path)?
            .into_iter()
            .filter_map(|r| match r {
                SensorRecord::Truth(t) => Some((t.timestamp, t.position)),
                _ => None,
            })
            .collect())
    } else {
        Ok(read_trajectory(open(path)?)
            .map_err(|e| record_err(path, e))?
            .into_iter()
            .map(|p| (p.timestamp, p.position))
            .collect())
    }
}

/// Evaluates `estimate` against `reference` and writes the report (text plus
/// `.json` sibling) to `report` when given.
pub fn cmd_eval(
    estimate: &Path,
    reference: &Path,
    cfg: &RunConfig,
    loop_period: Option<f64>,
    report: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let est = load_positions(estimate)?;
    let refp = load_positions(reference)?;
    let period = loop_period.or_else(|| cfg.scenario.loop_period());
    let eval_err = |e: EvalError| match e {
        EvalError::InvalidTolerance(_) => CliError::Config(e.to_string()),
        _ => CliError::EvalUndefined(e.to_string()),
    };
    let est = if cfg.eval.align {
        evaluation::align_rigid(&est, &refp, cfg.eval.tolerance).map_err(eval_err)?
    } else {
        est
    };
    let rep = evaluation::evaluate(&est, &refp, cfg.eval.tolerance, cfg.eval.planar, period).map_err(eval_err)?;
    if let Some(path) = report {
        write_text(path, &rep.to_text())?;
        write_text(&json_sibling(path), &(rep.to_json() + "\n"))?;
    }
    Ok(rep)
}

pub const SERIES_UNCERTAINTY_HEADER: &str = "timestamp,var_x,var_y,var_z,in_dropout";

fn series_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "traj".into(), |s| s.to_string_lossy().into_owned())
}

fn nearest(track: &[TimedPosition], t: f64, tol: f64) -> Option<Vector3<f64>> {
    let i = track.partition_point(|(tp, _)| *tp < t);
    [i.checked_sub(1), (i < track.len()).then_some(i)]
        .into_iter()
        .flatten()
        .map(|j| track[j])
        .filter(|(tp, _)| (tp - t).abs() <= tol)
        .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
        .map(|(_, p)| p)
}

/// Reads the dropout intervals back out of a fuse report (JSON).
pub fn load_intervals(path: &Path) -> Result<Vec<DropoutInterval>, CliError> {
    #[derive(Deserialize)]
    struct Partial {
        dropout_intervals: Vec<DropoutInterval>,
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let p: Partial = serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(p.dropout_intervals)
}

/// Writes `positions.csv` (the first trajectory's timestamps, then
/// `<name>_x,<name>_y,<name>_z` per input, empty where a trajectory has no
/// sample within tolerance) and `uncertainty.csv` (the first trajectory's
/// variances with a 0/1 dropout annotation). Returns the written paths.
pub fn cmd_export_plots(
    trajectories: &[PathBuf],
    report: Option<&Path>,
    out_dir: &Path,
    tolerance: f64,
) -> Result<Vec<PathBuf>, CliError> {
    let Some(first) = trajectories.first() else {
        return Err(CliError::Config("export-plots needs at least one trajectory".into()));
    };
    let base = read_trajectory(open(first)?).map_err(|e| record_err(first, e))?;
    let tracks: Vec<Vec<TimedPosition>> = trajectories
        .iter()
        .map(|p| load_positions(p))
        .collect::<Result<_, _>>()?;
    let intervals = match report {
        Some(r) => load_intervals(r)?,
        None => Vec::new(),
    };

    let mut header = String::from("timestamp");
    for p in trajectories {
        let n = series_name(p);
        header.push_str(&format!(",{n}_x,{n}_y,{n}_z"));
    }
    let mut body = header + "\n";
    for pose in &base {
        body.push_str(&pose.timestamp.to_string());
        for track in &tracks {
            match nearest(track, pose.timestamp, tolerance) {
                Some(p) => body.push_str(&format!(",{},{},{}", p.x, p.y, p.z)),
                None => body.push_str(",,,"),
            }
        }
        body.push('\n');
    }
    let pos_path = out_dir.join("positions.csv");
    write_text(&pos_path, &body)?;

    let mut unc = format!("{SERIES_UNCERTAINTY_HEADER}\n");
    for pose in &base {
        let u = pose.uncertainty;
        let flag = u8::from(intervals.iter().any(|iv| iv.contains(pose.timestamp)));
        unc.push_str(&format!(
            "{},{},{},{},{flag}\n",
            pose.timestamp, u.var_x, u.var_y, u.var_z
        ));
    }
    let unc_path = out_dir.join("uncertainty.csv");
    write_text(&unc_path, &unc)?;
    Ok(vec![pos_path, unc_path])
}
