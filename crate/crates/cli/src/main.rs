use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use chemotax_cli::{execute, parse_config, Mode, RunError, RunOptions};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Simulate,
    Convergence,
    EnergyReport,
    Optimize,
    Validate,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Simulate => Mode::Simulate,
            ModeArg::Convergence => Mode::Convergence,
            ModeArg::EnergyReport => Mode::EnergyReport,
            ModeArg::Optimize => Mode::Optimize,
            ModeArg::Validate => Mode::Validate,
        }
    }
}

/// Simulate, study and control the chemotaxis-consumption system.
#[derive(Debug, Parser)]
#[command(name = "chemotax", version)]
struct Cli {
    mode: ModeArg,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for parameter sweeps.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Print the results block of the manifest to stdout.
    #[arg(long)]
    report: bool,
    /// Write a gnuplot script next to every CSV.
    #[arg(long)]
    gnuplot: bool,
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CHEMOTAX_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(RunError::Config(vec![format!("--jobs: {e}")]));
        }
    }
    let cfg = match parse_config(&cli.config, cli.mode.into()) {
        Ok(c) => c,
        Err(errors) => return fail(RunError::Config(errors)),
    };
    match execute(&cfg, &cli.out, &RunOptions { gnuplot: cli.gnuplot }) {
        Ok(outcome) => {
            if cli.report {
                println!("{}", serde_json::to_string_pretty(&outcome.results).unwrap_or_default());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}
