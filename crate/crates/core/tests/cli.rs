mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use geofuse::cli::RunConfig;
use tempfile::TempDir;

use common::repo_root;

const SHORT: &str = "[scenario]\nduration = 60.0\ndropout_windows = [[20.0, 30.0]]\n";
const CLEAN: &str = "[scenario]\nduration = 30.0\nruns = 1\ndropout_windows = []\nscan_rate = 0.0\n";

fn geofuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofuse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn workspace(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_reports_per_stream_counts() {
    let dir = workspace(SHORT);
    let out = ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    assert_eq!(field(&out, "gps"), "601");
    assert_eq!(field(&out, "imu"), "6001");
    assert_eq!(field(&out, "lio"), "601");
    assert_eq!(field(&out, "truth"), "6001");
    assert_eq!(field(&out, "scan"), "61");
    let lines = fs::read_to_string(dir.path().join("out/sensors.jsonl"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(field(&out, "total"), lines.to_string());
}

#[test]
fn zero_duration_writes_empty_log() {
    let dir = workspace("[scenario]\nduration = 0.0\ndropout_windows = []\n");
    let out = ok(&geofuse(
        dir.path(),
        &["--config", "run.toml", "simulate", "--out", "empty.jsonl"],
    ));
    assert_eq!(field(&out, "total"), "0");
    assert_eq!(fs::read_to_string(dir.path().join("empty.jsonl")).unwrap(), "");
}

#[test]
fn fuse_writes_trajectory_map_and_reports() {
    let dir = workspace(SHORT);
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    let out = ok(&geofuse(dir.path(), &["--config", "run.toml", "fuse"]));
    assert_eq!(field(&out, "dropout_interval_count"), "1");
    assert_eq!(field(&out, "uncertainty_source"), "gps_message");
    let traj = fs::read_to_string(dir.path().join("out/fused.txt")).unwrap();
    assert!(traj.starts_with("# timestamp x y z qx qy qz qw source_x source_y source_z var_x var_y var_z\n"));
    assert_eq!(traj.lines().count(), 1 + 601);
    let report = json(&dir.path().join("out/report.json"));
    for key in [
        "input",
        "poses",
        "uncertainty_source",
        "thresholds",
        "dropout_intervals",
        "switch_count",
        "max_switch_jump",
        "switches",
        "counters",
        "map_points",
        "map_dispersion",
        "warnings",
    ] {
        assert!(report.get(key).is_some(), "report.json lacks {key}");
    }
    assert_eq!(report["dropout_intervals"].as_array().unwrap().len(), 1);
    let map = fs::read_to_string(dir.path().join("out/map.xyz")).unwrap();
    let count: usize = map.lines().next().unwrap().parse().unwrap();
    assert_eq!(count, map.lines().count() - 1);
    assert!(count > 0);
}

#[test]
fn overrides_take_precedence_over_config() {
    let dir = workspace(SHORT);
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    let out = ok(&geofuse(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "--uncertainty-source",
            "filter",
            "--thresholds",
            "2,2,2",
            "fuse",
        ],
    ));
    assert_eq!(field(&out, "uncertainty_source"), "filter");
    assert_eq!(field(&out, "thresholds"), "2,2,2");
}

#[test]
fn malformed_line_exits_3_and_names_the_line() {
    let dir = workspace(CLEAN);
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    let log = dir.path().join("out/sensors.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    lines[4] = "{\"t\": 0.5, \"type\": \"gps\", \"lat\": ".into();
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    let out = geofuse(dir.path(), &["--config", "run.toml", "fuse"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 5"));
}

#[test]
fn missing_input_exits_2() {
    let dir = workspace(CLEAN);
    let out = geofuse(dir.path(), &["--config", "run.toml", "fuse", "--input", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_3() {
    let dir = workspace("[gate]\nthreshold = 1.0\n");
    let out = geofuse(dir.path(), &["--config", "run.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_of_identical_trajectories_is_zero() {
    let dir = workspace(CLEAN);
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    ok(&geofuse(dir.path(), &["--config", "run.toml", "fuse"]));
    let out = ok(&geofuse(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "eval",
            "--estimate",
            "out/fused.txt",
            "--reference",
            "out/fused.txt",
            "--report",
            "eval.txt",
        ],
    ));
    assert_eq!(field(&out, "rmse"), "0");
    assert_eq!(field(&out, "rmse_z"), "0");
    assert_eq!(field(&out, "unmatched"), "0");
    let report = json(&dir.path().join("eval.json"));
    for key in [
        "rmse",
        "rmse_x",
        "rmse_y",
        "rmse_z",
        "matches",
        "unmatched",
        "end_to_end_error",
        "multi_run_dispersion",
    ] {
        assert!(report.get(key).is_some(), "eval.json lacks {key}");
    }

    // Against the truth in the log the error is small but not zero.
    let out = ok(&geofuse(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "eval",
            "--estimate",
            "out/fused.txt",
            "--reference",
            "out/sensors.jsonl",
        ],
    ));
    let e: f64 = field(&out, "rmse").parse().unwrap();
    assert!(e > 0.0 && e < 0.5, "rmse {e}");
}

#[test]
fn eval_without_matches_exits_4() {
    let dir = workspace(CLEAN);
    fs::write(
        dir.path().join("a.txt"),
        "# timestamp x y z\n0 0 0 0 0 0 0 1 fusion fusion fusion 0 0 0\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("b.txt"),
        "# timestamp x y z\n50 0 0 0 0 0 0 1 fusion fusion fusion 0 0 0\n",
    )
    .unwrap();
    let out = geofuse(dir.path(), &["eval", "--estimate", "a.txt", "--reference", "b.txt"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn export_plots_writes_aligned_series() {
    let dir = workspace(CLEAN);
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    ok(&geofuse(dir.path(), &["--config", "run.toml", "fuse"]));
    ok(&geofuse(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "export-plots",
            "--trajectory",
            "out/fused.txt",
            "--trajectory",
            "out/lio.txt",
            "--trajectory",
            "out/truth.txt",
            "--report",
            "out/report.json",
            "--out-dir",
            "plots",
        ],
    ));
    let pos = fs::read_to_string(dir.path().join("plots/positions.csv")).unwrap();
    assert_eq!(
        pos.lines().next().unwrap(),
        "timestamp,fused_x,fused_y,fused_z,lio_x,lio_y,lio_z,truth_x,truth_y,truth_z"
    );
    assert_eq!(pos.lines().count(), 1 + 301);
    let unc = fs::read_to_string(dir.path().join("plots/uncertainty.csv")).unwrap();
    let mut lines = unc.lines();
    assert_eq!(lines.next().unwrap(), "timestamp,var_x,var_y,var_z,in_dropout");
    assert!(lines.all(|l| l.ends_with(",0")));
}

#[test]
fn committed_default_config_matches_built_in_defaults() {
    let cfg = RunConfig::load(&repo_root().join("configs/default.toml")).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn every_committed_config_loads() {
    for entry in fs::read_dir(repo_root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.scenario.validate().unwrap();
        cfg.pipeline_config().unwrap();
    }
}

#[test]
fn uncertainty_series_marks_exactly_the_injected_dropout() {
    let dir = workspace(SHORT);
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    ok(&geofuse(dir.path(), &["--config", "run.toml", "fuse"]));
    ok(&geofuse(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "export-plots",
            "--trajectory",
            "out/fused.txt",
            "--report",
            "out/report.json",
        ],
    ));
    let unc = fs::read_to_string(dir.path().join("out/plots/uncertainty.csv")).unwrap();
    for line in unc.lines().skip(1) {
        let c: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        let injected = (20.0..=30.0).contains(&c[0]);
        assert_eq!(c[4] == 1.0, injected, "{line}");
        assert_eq!(c[1] > 1.0, injected, "{line}");
    }
}

#[test]
fn log_without_gps_fuses_with_warning() {
    let dir = workspace(CLEAN);
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    let log = dir.path().join("out/sensors.jsonl");
    let kept: Vec<String> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"type\":\"gps\""))
        .map(String::from)
        .collect();
    fs::write(&log, kept.join("\n") + "\n").unwrap();
    let out = ok(&geofuse(dir.path(), &["--config", "run.toml", "fuse"]));
    assert_eq!(field(&out, "gps_records"), "0");
    assert_eq!(field(&out, "warning_count"), "1");
    let report = json(&dir.path().join("out/report.json"));
    assert!(report["warnings"][0].as_str().unwrap().contains("no GPS"));
}

#[test]
fn aligned_eval_removes_a_rigid_offset() {
    let dir = workspace(&format!("{CLEAN}[eval]\nalign = true\n"));
    ok(&geofuse(dir.path(), &["--config", "run.toml", "simulate"]));
    let truth = fs::read_to_string(dir.path().join("out/truth.txt")).unwrap();
    let shifted: String = truth
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                return format!("{l}\n");
            }
            let mut c: Vec<String> = l.split(' ').map(String::from).collect();
            let x: f64 = c[1].parse().unwrap();
            let y: f64 = c[2].parse().unwrap();
            c[1] = (-y + 3.0).to_string();
            c[2] = (x - 1.0).to_string();
            c.join(" ") + "\n"
        })
        .collect();
    fs::write(dir.path().join("shifted.txt"), shifted).unwrap();
    let args = ["eval", "--estimate", "shifted.txt", "--reference", "out/truth.txt"];
    let aligned = ok(&geofuse(dir.path(), &[&["--config", "run.toml"][..], &args].concat()));
    let raw = ok(&geofuse(dir.path(), &args));
    assert!(field(&aligned, "rmse").parse::<f64>().unwrap() < 1e-6);
    assert!(field(&raw, "rmse").parse::<f64>().unwrap() > 1.0);
}
