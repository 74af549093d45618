use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pnpf::experiments::{load_config, run_experiment, RunConfig, RunError};
use pnpf::mms::{level_sizes, run_convergence_study, write_convergence_csv};
use pnpf::model::StepConfig;
use pnpf::stepper::SchemeKind;

/// Poisson-Nernst-Planck-Fourier finite-volume simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the configured one.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time step, overriding the configured one.
        #[arg(long)]
        dt: Option<f64>,
        /// Configuration override `key=value`; dotted keys select sections.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check a configuration file without running it.
    Validate {
        config: PathBuf,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Manufactured-solution convergence study on the unit square.
    Mms {
        /// 1 for the first-order scheme, 2 for the second-order one.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        scheme: u8,
        /// Number of grids, starting at 8x8 and doubling.
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Fixed time step for every level instead of the scheme's rule.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 0.1)]
        t_end: f64,
    },
}

fn load(config: &Path, dt: Option<f64>, mut overrides: Vec<String>) -> Result<RunConfig, RunError> {
    if let Some(dt) = dt {
        overrides.push(format!("dt={dt:e}"));
    }
    Ok(load_config(config, &overrides)?)
}

fn execute(cmd: Command) -> Result<(), RunError> {
    match cmd {
        Command::Run { config, out, dt, overrides } => {
            let cfg = load(&config, dt, overrides)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            run_experiment(&cfg, &out)?;
            println!("outputs written to {}", out.display());
        }
        Command::Validate { config, dt, overrides } => {
            let cfg = load(&config, dt, overrides)?;
            print!("{}", cfg.manifest());
        }
        Command::Mms { scheme, levels, out, dt, t_end } => {
            let scheme = SchemeKind::from_number(scheme).expect("range checked by the parser");
            if levels < 2 || !(t_end > 0.0) || dt.is_some_and(|d| !(d > 0.0)) {
                return Err(pnpf::experiments::ConfigError::Invalid(
                    "need at least 2 levels and positive t_end and dt".into(),
                )
                .into());
            }
            let rows = run_convergence_study(scheme, &level_sizes(levels), dt, t_end, &StepConfig::default())
                .map_err(|source| RunError::Solver { t: f64::NAN, source })?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("convergence.csv");
            write_convergence_csv(&rows, std::fs::File::create(&path)?)
                .map_err(|e| RunError::Output(e.to_string()))?;
            write_convergence_csv(&rows, std::io::stdout()).map_err(|e| RunError::Output(e.to_string()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
