use std::path::PathBuf;
use std::process::exit;

use bottleneck_es::cli;
use bottleneck_es::sim::OpenLoopScenario;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "bottleneck-es",
    version,
    about = "Traffic bottleneck extremum-seeking: finite-volume LWR road with delay-compensated dither control",
    long_about = "Simulates a freeway segment feeding a capacity-dropping bottleneck and an \
extremum-seeking controller that tunes the inlet density toward the unknown critical \
density. All commands write CSV plus a sibling .report; omit --config to run the \
built-in reference experiment."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Scenario {
    /// Inlet demand ramps from the reference density toward jam density
    Ramp,
    /// Inlet demand held at --inlet-density
    Constant,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-loop run: plant + extremum-seeking controller
    Run {
        /// Config file (key = value lines); defaults apply when omitted
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Output CSV path; the report lands next to it
        #[arg(short, long, default_value = "run.csv")]
        out: PathBuf,
        /// Set a single config key, e.g. --override a=0.1 (repeatable)
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Open-loop baseline without control
    Baseline {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "baseline.csv")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Scenario::Ramp)]
        scenario: Scenario,
        /// Constant inlet density (required for --scenario constant)
        #[arg(long)]
        inlet_density: Option<f64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Integrate the delay-compensated averaged model (analysis oracle)
    Oracle {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "oracle.csv")]
        out: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Grid sweep over dither amplitude and frequency
    Sweep {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Directory for per-cell CSVs, summary.csv and ratios.csv
        #[arg(short, long, default_value = "sweep")]
        out_dir: PathBuf,
        /// Comma-separated dither amplitudes
        #[arg(long, value_delimiter = ',', required = true)]
        amplitudes: Vec<f64>,
        /// Comma-separated dither frequencies (rad/s)
        #[arg(long, value_delimiter = ',', required = true)]
        frequencies: Vec<f64>,
        /// Worker threads for grid cells
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            out,
            overrides,
        } => cli::cmd_run(config.as_deref(), &out, &overrides),
        Command::Baseline {
            config,
            out,
            scenario,
            inlet_density,
            overrides,
        } => {
            let scenario = match (scenario, inlet_density) {
                (Scenario::Ramp, _) => OpenLoopScenario::RampedDemand,
                (Scenario::Constant, Some(rho)) => OpenLoopScenario::ConstantInlet(rho),
                (Scenario::Constant, None) => {
                    eprintln!("error: --scenario constant needs --inlet-density");
                    exit(2);
                }
            };
            cli::cmd_baseline(config.as_deref(), &out, scenario, &overrides)
        }
        Command::Oracle {
            config,
            out,
            overrides,
        } => cli::cmd_oracle(config.as_deref(), &out, &overrides),
        Command::Sweep {
            config,
            out_dir,
            amplitudes,
            frequencies,
            jobs,
            overrides,
        } => cli::cmd_sweep(
            config.as_deref(),
            &out_dir,
            &amplitudes,
            &frequencies,
            jobs,
            &overrides,
        ),
    };
    exit(code);
}
