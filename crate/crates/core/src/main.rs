//! Command-line surface: reads a problem file, runs a solver, writes CSV
//! and JSON artifacts.
//!
//! Exit codes: 0 on success (verification accepted where applicable), 2 on
//! a verification reject, 3 on a solver failure, 4 on bad input. Result
//! payloads carry no timestamps; a `run.log` sidecar records the wall-clock
//! run for bookkeeping.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};

use chronotact::emit::{
    control_csv, curve_csv, steer_csv, trace_csv, trajectory_csv, NormOptRecord, SteerRecord,
    TimeOptRecord,
};
use chronotact::model::{parse_problem, validate_spec, ProblemSpec};
use chronotact::odeflow::propagate_primal;
use chronotact::steering::steer_to_zero;
use chronotact::synthesis::{
    mtilde_curve, synthesize_norm_optimal, BangBangControl, ChannelControl, Provenance,
};
use chronotact::timeopt::{solve_time_optimal, TimeOptError, TimeOptOptions};
use chronotact::verify::{check_time_optimality, Verdict};

#[derive(Parser)]
#[command(
    name = "chronotact",
    about = "Time-optimal and norm-optimal control of linear time-varying ODEs \
             under rectangular control constraints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Problem file (JSON).
    #[arg(long)]
    problem: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress CSV artifacts.
    #[arg(long)]
    no_csv: bool,
    /// Suppress JSON artifacts.
    #[arg(long)]
    no_json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the optimal time t*(M) and the time-optimal control.
    SolveTime {
        #[command(flatten)]
        common: CommonArgs,
        /// Control bound M.
        #[arg(long = "M")]
        bound: f64,
        /// Initial horizon step for the bracket search.
        #[arg(long, default_value_t = 1.0)]
        t0: f64,
        /// Bracket-width stopping tolerance.
        #[arg(long = "tol-time")]
        tol_time: Option<f64>,
        /// Early-exit tolerance on |M-tilde - M|.
        #[arg(long = "tol-m")]
        tol_m: Option<f64>,
    },
    /// Compute the optimal norm M-tilde(T) and its control.
    SolveNorm {
        #[command(flatten)]
        common: CommonArgs,
        /// Horizon T.
        #[arg(long = "T")]
        horizon: f64,
    },
    /// Sample the curve T -> M-tilde(T).
    Curve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "T-min")]
        t_min: f64,
        #[arg(long = "T-max")]
        t_max: f64,
        /// Number of samples (inclusive of both ends).
        #[arg(long)]
        samples: usize,
    },
    /// Gramian steering of the initial state to zero on one channel.
    Steer {
        #[command(flatten)]
        common: CommonArgs,
        /// Horizon T.
        #[arg(long = "T")]
        horizon: f64,
        /// Start time of the steering interval.
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Control channel index.
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
    /// Re-check a previously written result.json against the problem.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
    },
}

enum Failure {
    /// Exit 2: a verification verdict rejected the result.
    Reject(String),
    /// Exit 3: a solver could not produce a result.
    Solver(String),
    /// Exit 4: unusable input.
    Input(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Reject(_) => 2,
            Failure::Solver(_) => 3,
            Failure::Input(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            Failure::Reject(m) | Failure::Solver(m) | Failure::Input(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are not failures.
            use clap::error::ErrorKind;
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            ) {
                let _ = err.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{err}");
            return ExitCode::from(4);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn load_problem(path: &Path) -> Result<ProblemSpec, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|err| Failure::Input(format!("cannot read {}: {err}", path.display())))?;
    let spec = parse_problem(&text).map_err(|err| Failure::Input(err.to_string()))?;
    let report = validate_spec(&spec);
    for (code, message) in &report.warnings {
        eprintln!("warning [{code}]: {message}");
    }
    if !report.ok {
        let mut lines = Vec::new();
        for (code, message) in &report.violations {
            lines.push(format!("[{code}] {message}"));
        }
        return Err(Failure::Input(format!(
            "problem fails validation: {}",
            lines.join("; ")
        )));
    }
    Ok(spec)
}

fn write_artifact(dir: &Path, name: &str, content: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|err| Failure::Input(format!("cannot create {}: {err}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, content)
        .map_err(|err| Failure::Input(format!("cannot write {}: {err}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(
    common: &CommonArgs,
    name: &str,
    value: &T,
) -> Result<(), Failure> {
    if common.no_json {
        return Ok(());
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|err| Failure::Solver(format!("serialization failed: {err}")))?;
    text.push('\n');
    write_artifact(&common.out, name, &text)
}

fn write_csv(common: &CommonArgs, name: &str, content: &str) -> Result<(), Failure> {
    if common.no_csv {
        return Ok(());
    }
    write_artifact(&common.out, name, content)
}

fn write_run_log(common: &CommonArgs, summary: &str) {
    let stamp = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let line = format!("unix_time={stamp} {summary}\n");
    if fs::create_dir_all(&common.out).is_ok() {
        let _ = fs::write(common.out.join("run.log"), line);
    }
}

fn solver_failure<E: std::fmt::Display>(err: E) -> Failure {
    Failure::Solver(err.to_string())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::SolveTime {
            common,
            bound,
            t0,
            tol_time,
            tol_m,
        } => {
            if bound <= 0.0 || t0 <= 0.0 {
                return Err(Failure::Input("need M > 0 and t0 > 0".into()));
            }
            let spec = load_problem(&common.problem)?;
            let opts = TimeOptOptions {
                t0,
                tol_t: tol_time,
                tol_m,
                ..Default::default()
            };
            let (result, rejected) = match solve_time_optimal(&spec, bound, &opts) {
                Ok(result) => (result, None),
                Err(TimeOptError::VerificationFailed { report, result }) => {
                    let why = report.notes.join("; ");
                    (*result, Some(why))
                }
                Err(err) => return Err(solver_failure(err)),
            };
            write_json(&common, "result.json", &TimeOptRecord::from(&result))?;
            write_csv(&common, "control.csv", &control_csv(&result.control, 2048))?;
            let traj = propagate_primal(&spec, &spec.y0, &result.control, result.t_star)
                .map_err(solver_failure)?;
            write_csv(&common, "trajectory.csv", &trajectory_csv(&traj))?;
            write_csv(&common, "trace.csv", &trace_csv(&result))?;
            write_run_log(
                &common,
                &format!("solve-time M={bound} t_star={}", result.t_star),
            );
            println!(
                "t_star = {:.9}, M_check = {:.9}, switches = {:?}",
                result.t_star,
                result.m_check,
                result
                    .control
                    .channels
                    .iter()
                    .map(|ch| ch.switch_times.len())
                    .collect::<Vec<_>>()
            );
            match rejected {
                Some(why) => Err(Failure::Reject(format!("verification rejected: {why}"))),
                None => Ok(()),
            }
        }
        Command::SolveNorm { common, horizon } => {
            if horizon <= 0.0 {
                return Err(Failure::Input("need T > 0".into()));
            }
            let spec = load_problem(&common.problem)?;
            let result = synthesize_norm_optimal(&spec, horizon).map_err(solver_failure)?;
            write_json(&common, "result.json", &NormOptRecord::from(&result))?;
            write_csv(&common, "control.csv", &control_csv(&result.control, 2048))?;
            let traj = propagate_primal(&spec, &spec.y0, &result.control, horizon)
                .map_err(solver_failure)?;
            write_csv(&common, "trajectory.csv", &trajectory_csv(&traj))?;
            write_run_log(
                &common,
                &format!("solve-norm T={horizon} M_tilde={}", result.m_tilde),
            );
            println!(
                "M_tilde = {:.9}, terminal residual = {:.3e}",
                result.m_tilde, result.terminal_residual
            );
            Ok(())
        }
        Command::Curve {
            common,
            t_min,
            t_max,
            samples,
        } => {
            if !(t_min > 0.0 && t_max > t_min && samples >= 2) {
                return Err(Failure::Input(
                    "need 0 < T-min < T-max and samples >= 2".into(),
                ));
            }
            let spec = load_problem(&common.problem)?;
            let horizons: Vec<f64> = (0..samples)
                .map(|j| t_min + j as f64 * (t_max - t_min) / (samples - 1) as f64)
                .collect();
            let curve = mtilde_curve(&spec, &horizons).map_err(solver_failure)?;
            write_csv(&common, "mtilde.csv", &curve_csv(&curve))?;
            write_run_log(&common, &format!("curve samples={samples}"));
            println!(
                "M_tilde from {:.9} at T={} down to {:.9} at T={}",
                curve.first().unwrap().1,
                curve.first().unwrap().0,
                curve.last().unwrap().1,
                curve.last().unwrap().0
            );
            Ok(())
        }
        Command::Steer {
            common,
            horizon,
            tau,
            channel,
        } => {
            if !(horizon > 0.0 && (0.0..horizon).contains(&tau)) {
                return Err(Failure::Input("need 0 <= tau < T".into()));
            }
            let spec = load_problem(&common.problem)?;
            if channel >= spec.d {
                return Err(Failure::Input(format!(
                    "channel {channel} out of range (d = {})",
                    spec.d
                )));
            }
            let result =
                steer_to_zero(&spec, tau, horizon, &spec.y0, channel).map_err(solver_failure)?;
            write_csv(&common, "steer.csv", &steer_csv(&result))?;
            write_json(&common, "steer.json", &SteerRecord::from(&result))?;
            write_run_log(&common, &format!("steer T={horizon} tau={tau}"));
            println!(
                "sup|u| = {:.9} (bound {:.3e}), terminal norm = {:.3e}",
                result.sup_norm, result.bound_c, result.terminal_norm
            );
            Ok(())
        }
        Command::Verify { common } => {
            let spec = load_problem(&common.problem)?;
            let record_path = common.out.join("result.json");
            let text = fs::read_to_string(&record_path).map_err(|err| {
                Failure::Input(format!("cannot read {}: {err}", record_path.display()))
            })?;
            let record: TimeOptRecord = serde_json::from_str(&text)
                .map_err(|err| Failure::Input(format!("bad result record: {err}")))?;
            if record.levels.len() != spec.d
                || record.initial_signs.len() != spec.d
                || record.switch_times.len() != spec.d
            {
                return Err(Failure::Input(
                    "result record channel count does not match the problem".into(),
                ));
            }
            let control = BangBangControl {
                horizon: record.t_star,
                channels: (0..spec.d)
                    .map(|i| ChannelControl {
                        level: record.levels[i],
                        initial_sign: record.initial_signs[i],
                        switch_times: record.switch_times[i].clone(),
                    })
                    .collect(),
                provenance: Provenance::TimeOptimal,
            };
            let report = check_time_optimality(&spec, record.bound, record.t_star, &control)
                .map_err(solver_failure)?;
            write_json(&common, "report.json", &report)?;
            write_run_log(
                &common,
                &format!("verify M={} t_star={}", record.bound, record.t_star),
            );
            println!(
                "verdict: {:?} (eq28 residual {:.3e}, terminal {:.3e})",
                report.verdict, report.eq28_residual, report.terminal_residual
            );
            if report.verdict == Verdict::Reject {
                return Err(Failure::Reject(report.notes.join("; ")));
            }
            Ok(())
        }
    }
}
