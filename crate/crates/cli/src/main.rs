use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use steer_cli::{load_scenario, parse_times, run, Overrides};
use steer_core::scenario::Mode;
use steer_core::SteerError;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Bridge,
    Ot,
    Hjb,
    Verify,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bridge => Mode::Bridge,
            ModeArg::Ot => Mode::Ot,
            ModeArg::Hjb => Mode::Hjb,
            ModeArg::Verify => Mode::Verify,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BuiltinArg {
    Example1,
    Example2,
    Brunovsky2d,
}

impl BuiltinArg {
    fn name(self) -> &'static str {
        match self {
            BuiltinArg::Example1 => "example1",
            BuiltinArg::Example2 => "example2",
            BuiltinArg::Brunovsky2d => "brunovsky2d",
        }
    }
}

/// Density steering for feedback linearizable systems.
#[derive(Debug, Parser)]
#[command(name = "steer", version)]
struct Cli {
    /// Scenario JSON document.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Built-in scenario.
    #[arg(long, value_enum)]
    builtin: Option<BuiltinArg>,
    /// Overrides the scenario's mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Defaults to out/<scenario name>.
    #[arg(long, value_name = "PATH")]
    output_dir: Option<PathBuf>,
    /// Comma-separated snapshot times; must include 0 and 1.
    #[arg(long, value_name = "T1,T2,...")]
    snapshots: Option<String>,
    /// Bridge regularization ε.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Fixed-point iteration budget.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Fixed-point residual target δ.
    #[arg(long)]
    tolerance: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<ExitCode, SteerError> {
    let ovr = Overrides {
        mode: cli.mode.map(Mode::from),
        output_dir: cli.output_dir.clone(),
        snapshots: cli.snapshots.as_deref().map(parse_times).transpose()?,
        epsilon: cli.epsilon,
        max_iter: cli.max_iter,
        tolerance: cli.tolerance,
    };
    let scn = load_scenario(
        cli.config.as_deref(),
        cli.builtin.map(BuiltinArg::name),
        &ovr,
    )?;
    let (dir, outcome) = run(&scn)?;
    for line in &outcome.lines {
        println!("{line}");
    }
    println!("artifacts in {}", dir.display());
    Ok(match outcome.failure {
        None => ExitCode::SUCCESS,
        Some(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
    })
}
