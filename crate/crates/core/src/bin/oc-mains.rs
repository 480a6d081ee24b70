use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oc_mains::cli::{self, Failure, Overrides};
use oc_mains::config::Mode;
use oc_mains::simulator::FilterSelection;

#[derive(Parser)]
#[command(name = "oc-mains", version, about = "Magnetic-field-aided INS with an observability-constrained EKF")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo simulation over the square trajectory.
    Sim(RunArgs),
    /// Run both filters over a recorded dataset (imu.csv, mag.csv, optional gt.csv).
    Real {
        #[command(flatten)]
        run: RunArgs,
        /// Dataset directory; overrides `dataset` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Summarize the diagnostics of a results directory.
    Analyze {
        /// Results directory written by `sim` or `real`.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Monte-Carlo runs (sim) or re-initializations (real).
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Which filters to run.
    #[arg(long, value_enum)]
    oc: Option<OcArg>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OcArg {
    On,
    Off,
    Both,
}

impl From<OcArg> for FilterSelection {
    fn from(a: OcArg) -> Self {
        match a {
            OcArg::On => FilterSelection::On,
            OcArg::Off => FilterSelection::Off,
            OcArg::Both => FilterSelection::Both,
        }
    }
}

fn overrides(a: &RunArgs, dataset: Option<PathBuf>) -> Overrides {
    Overrides { runs: a.runs, seed: a.seed, oc: a.oc.map(Into::into), out: a.out.clone(), dataset }
}

fn run(command: Command) -> Result<(), Failure> {
    let stdout = std::io::stdout();
    match command {
        Command::Sim(args) => {
            let cfg = cli::load_config(args.config.as_deref(), Mode::Sim, &overrides(&args, None))?;
            let report = cli::run_sim(&cfg, None)?;
            println!("wrote {}", cfg.out.display());
            let _ = report.print(stdout.lock());
        }
        Command::Real { run, data } => {
            let cfg = cli::load_config(run.config.as_deref(), Mode::Real, &overrides(&run, data))?;
            let report = cli::run_real(&cfg, None)?;
            println!("wrote {}", cfg.out.display());
            let _ = report.print(stdout.lock());
        }
        Command::Analyze { dir } => cli::analyze(&dir, stdout.lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
