use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use statris::cli::{
    cmd_experiment, cmd_optimize, cmd_selftest, exit_code, Overrides, EXIT_FAILURE, EXIT_NOT_CONVERGED, EXIT_OK,
    EXIT_USAGE,
};
use statris::harness::Family;
use statris::Error;

/// RIS phase and bilinear precoder design from channel statistics.
///
/// Exit codes: 0 success, 1 failed self-test or other failure, 2 usage or
/// configuration error, 3 numerical failure, 4 I/O failure, 5 optimizer did
/// not converge (outputs are still written).
#[derive(Parser)]
#[command(name = "statris", version)]
struct Cli {
    /// Worker threads for parallel scenarios (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the statistical design once and write its trace, phases and filters.
    Optimize(RunArgs),
    /// Run one experiment family and write its tables.
    Experiment {
        #[arg(long)]
        family: Family,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the built-in oracle checks.
    Selftest {
        /// Fewer samples and looser tolerances.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated transmit powers in dB.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    power_db: Option<Vec<f64>>,
    /// Comma-separated RIS sizes.
    #[arg(long, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Reduced scenario and sample counts for a fast look.
    #[arg(long)]
    quick: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        let (scenarios, samples) = if self.quick { (Some(2), Some(20)) } else { (None, None) };
        Overrides {
            config: self.config.clone(),
            seed: self.seed,
            power_db: self.power_db.clone(),
            n_grid: self.n_grid.clone(),
            methods: self.methods.clone(),
            scenarios: self.scenarios.or(scenarios),
            samples: self.samples.or(samples),
        }
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code(err))
}

fn dispatch(command: Command, args: &[String]) -> ExitCode {
    match command {
        Command::Optimize(run) => match cmd_optimize(&run.overrides(), args, &run.out) {
            Ok(report) if report.converged => {
                println!(
                    "converged after {} sweeps, sum-rate lower bound {:.6} bit/s/Hz",
                    report.sweeps, report.final_rate
                );
                ExitCode::from(EXIT_OK)
            }
            Ok(report) => {
                eprintln!(
                    "not converged after {} sweeps, sum-rate lower bound {:.6} bit/s/Hz",
                    report.sweeps, report.final_rate
                );
                ExitCode::from(EXIT_NOT_CONVERGED)
            }
            Err(e) => fail(&e),
        },
        Command::Experiment { family, run } => match cmd_experiment(&run.overrides(), family, args, &run.out) {
            Ok(result) => {
                println!(
                    "{} done: {} rows, {} traces, written to {}",
                    result.family,
                    result.aggregate.len(),
                    result.traces.len(),
                    run.out.display()
                );
                ExitCode::from(EXIT_OK)
            }
            Err(e) => fail(&e),
        },
        Command::Selftest { quick } => {
            let checks = cmd_selftest(quick);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            ExitCode::from(if checks.iter().all(|c| c.passed) {
                EXIT_OK
            } else {
                EXIT_FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            ExitCode::from(EXIT_USAGE)
        }
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command, &args)),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_FAILURE)
            }
        },
        None => dispatch(cli.command, &args),
    }
}
