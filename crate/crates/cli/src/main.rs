use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ecram_cli::{self as cli, CliError};
use serde::Serialize;

/// Electrochemical random-access memory cell simulator.
#[derive(Parser)]
#[command(name = "ecram", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a protocol config (a JSON path, `-` for stdin, or `scenario:NAME`).
    Run {
        config: String,
        /// Output directory; overrides the config and the output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scale a retention time between temperatures with an Arrhenius law.
    ProjectRetention {
        /// Reference retention time in seconds.
        #[arg(long)]
        t_ref: f64,
        /// Reference temperature in kelvin.
        #[arg(long)]
        temp_ref: f64,
        /// Target temperature in kelvin.
        #[arg(long)]
        temp_target: f64,
        /// Activation energy in eV.
        #[arg(long)]
        ea: f64,
    },
    /// Fit ln I against 1/T from a CSV of `T,I` rows (`-` for stdin).
    FitArrhenius { csv: PathBuf },
    /// Run a one-dimensional Cahn-Hilliard config.
    Phasefield {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config once per value of one parameter, in parallel.
    Sweep {
        config: String,
        /// Dotted key to vary, e.g. `seed` or `protocol.0.v_gate`.
        #[arg(long)]
        path: String,
        /// Values, each parsed as JSON.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// List the shipped scenarios.
    ListScenarios,
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serialises"));
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out } => print_json(&cli::cmd_run(&config, out.as_deref())?),
        Command::ProjectRetention { t_ref, temp_ref, temp_target, ea } => {
            print_json(&cli::cmd_project_retention(t_ref, temp_ref, temp_target, ea)?)
        }
        Command::FitArrhenius { csv } => print_json(&cli::cmd_fit_arrhenius(&csv)?),
        Command::Phasefield { config, out } => print_json(&cli::cmd_phasefield(&config, out.as_deref())?),
        Command::Sweep { config, path, values, out, jobs } => {
            let values: Vec<_> = values.iter().map(|v| cli::parse_sweep_value(v)).collect();
            print_json(&cli::cmd_sweep(&config, &path, &values, out.as_deref(), jobs)?)
        }
        Command::ListScenarios => {
            for s in cli::list_scenarios()? {
                println!("{:<18} {}", s.name, s.description.unwrap_or_default());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Args::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
