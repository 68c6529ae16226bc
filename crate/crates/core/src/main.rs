use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geofuse::cli::{
    cmd_eval, cmd_export_plots, cmd_fuse, cmd_simulate, json_sibling, parse_thresholds, CliError, Overrides, RunConfig,
};
use geofuse::pipeline::UncertaintySource;

#[derive(Parser, Debug)]
#[command(
    name = "geofuse",
    version,
    about = "GPS / IMU / LIO fusion with per-axis uncertainty gating"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Gate variance thresholds `x,y,z` in m².
    #[arg(long, global = true, value_parser = parse_thresholds)]
    thresholds: Option<[f64; 3]>,
    /// `filter` or `gps_message`.
    #[arg(long, global = true)]
    uncertainty_source: Option<UncertaintySource>,
    /// Horizontal-only RMSE.
    #[arg(long, global = true)]
    planar: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a sensor log (and truth track) from the scenario.
    Simulate {
        /// Output log; defaults to `paths.log`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuse a sensor log into a gated trajectory, map and report.
    Fuse {
        /// Input log; defaults to `paths.log`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare an estimated trajectory against a reference.
    Eval {
        #[arg(long)]
        estimate: PathBuf,
        /// Trajectory file or sensor log with truth records.
        #[arg(long)]
        reference: PathBuf,
        /// Loop period for multi-run dispersion; defaults to the scenario's.
        #[arg(long)]
        loop_period: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write aligned CSV series for plotting.
    ExportPlots {
        /// Trajectory files; the first sets the time base and the uncertainty series.
        #[arg(long = "trajectory", required = true)]
        trajectories: Vec<PathBuf>,
        /// JSON fuse report carrying the dropout intervals.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Defaults to `paths.plots_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        thresholds: cli.thresholds,
        uncertainty_source: cli.uncertainty_source,
        planar: cli.planar,
    });
    match cli.command {
        Command::Simulate { out } => {
            if let Some(p) = out {
                cfg.paths.log = p;
            }
            let stats = cmd_simulate(&cfg)?;
            println!("log: {}", cfg.paths.log.display());
            println!("truth_trajectory: {}", cfg.paths.truth_trajectory.display());
            println!("duration: {}", cfg.scenario.duration);
            println!("gps: {}", stats.gps);
            println!("imu: {}", stats.imu);
            println!("lio: {}", stats.lio);
            println!("truth: {}", stats.truth);
            println!("scan: {}", stats.scan);
            println!("total: {}", stats.total());
        }
        Command::Fuse {
            input,
            trajectory,
            map,
            report,
        } => {
            let p = &mut cfg.paths;
            for (slot, v) in [
                (&mut p.log, input),
                (&mut p.trajectory, trajectory),
                (&mut p.map, map),
                (&mut p.report, report),
            ] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            let rep = cmd_fuse(&cfg)?;
            print!("{}", rep.to_text());
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Eval {
            estimate,
            reference,
            loop_period,
            report,
        } => {
            let rep = cmd_eval(&estimate, &reference, &cfg, loop_period, report.as_deref())?;
            print!("{}", rep.to_text());
            if let Some(r) = report {
                println!("report_json: {}", json_sibling(&r).display());
            }
        }
        Command::ExportPlots {
            trajectories,
            report,
            out_dir,
        } => {
            let dir = out_dir.unwrap_or_else(|| cfg.paths.plots_dir.clone());
            for p in cmd_export_plots(&trajectories, report.as_deref(), &dir, cfg.eval.tolerance)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
