//! Command-line front end: training runs, sweeps, calibration and the MAC
//! cost model.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpmul_core::harness::{self, mac_cost, CostQuery, ExperimentConfig, SummaryRow, SweepSpec};
use lpmul_core::scaling::write_calibration;
use lpmul_core::Error;

#[derive(Parser)]
#[command(name = "lpmul", version, about = "Train maxout networks with emulated low-precision multipliers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write logs, summary and checkpoint.
    Train {
        config: PathBuf,
        /// Output directory, overriding the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one variable and report errors relative to
    /// the exact-arithmetic baseline.
    Sweep {
        config: PathBuf,
        /// prop_width, update_width, radix_exponent or overflow_rate_max.
        #[arg(long)]
        var: String,
        /// Comma-separated values, e.g. 8,10,12.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiplier-accumulator cost in ALMs.
    Cost {
        #[arg(long)]
        mult: u32,
        #[arg(long)]
        acc: u32,
    },
    /// Run the exact calibration pass and write the per-group exponents.
    Calibrate {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> lpmul_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn run(cli: Cli) -> lpmul_core::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load(&config, out)?;
            let result = harness::run(&cfg)?;
            writeln!(stdout, "{}\n{}", SummaryRow::HEADER, result.summary.to_csv()).map_err(stdout_err)?;
        }
        Command::Sweep {
            config,
            var,
            values,
            out,
        } => {
            let cfg = load(&config, out)?;
            let spec = SweepSpec::parse(&var, &values)?;
            let result = harness::sweep(&cfg, &spec)?;
            result.write_csv(&mut stdout).map_err(stdout_err)?;
        }
        Command::Cost { mult, acc } => {
            let c = mac_cost(CostQuery::new(mult, acc)?);
            let exact = c.alms_exact.map(|v| v.to_string()).unwrap_or_default();
            writeln!(stdout, "mult_bits,acc_bits,alms_exact,alms_model").map_err(stdout_err)?;
            writeln!(stdout, "{mult},{acc},{exact},{:.1}", c.alms_model).map_err(stdout_err)?;
        }
        Command::Calibrate { config, out } => {
            let cfg = load(&config, out)?;
            let exps = harness::calibrate_only(&cfg)?;
            write_calibration(&mut stdout, &exps).map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
