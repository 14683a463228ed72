use std::path::PathBuf;
use std::process::ExitCode;

use bapo_cli::error::CliResult;
use bapo_cli::sweep::{parse_seeds, run_sweep, Axis, AxisValue};
use bapo_cli::{config_file, plot, train, verify, CliError};
use bapo_core::theory::Fault;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bapo-lab", version, about = "Clipped policy-gradient laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    PerturbGradient,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one training configuration and write `<run_id>.csv` and `<run_id>.manifest`.
    Train {
        /// TOML config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "BAPO_LAB_OUT", default_value = "runs")]
        out: PathBuf,
    },
    /// Run the theory checks and print a pass/fail table.
    Verify {
        #[arg(long, default_value = "default")]
        tolerance_profile: String,
        /// Instances per check, overriding each check's default.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "BAPO_LAB_OUT", default_value = "runs")]
        out: PathBuf,
        #[arg(long, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Run a base config across one axis and several seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = "BAPO_LAB_OUT", default_value = "runs")]
        out: PathBuf,
        /// `staleness`, `algorithm` or `clip_bounds`.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values; clip bounds as `c_low:c_high`.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Worker threads; 0 uses one per core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Plot metric columns against step, one series per file and column.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long = "column", value_delimiter = ',', required = true)]
        columns: Vec<String>,
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out } => {
            let art = train::cmd_train(config.as_deref(), &out)?;
            println!(
                "run {} ({} rows, digest {}) -> {}",
                art.manifest.run_id,
                art.manifest.rows,
                &art.manifest.config_digest[..12],
                art.csv_path().display()
            );
            Ok(())
        }
        Command::Verify {
            tolerance_profile,
            trials,
            seed,
            out,
            inject_fault,
        } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::PerturbGradient => Fault::PerturbGradient,
            });
            verify::cmd_verify(&tolerance_profile, trials, seed, fault, &out).map(|_| ())
        }
        Command::Sweep {
            config,
            out,
            axis,
            values,
            seeds,
            jobs,
        } => {
            let base = config_file::load(config.as_deref())?;
            let origin = config
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "<defaults>".into());
            let axis: Axis = axis.parse()?;
            let values = values
                .split(',')
                .filter(|v| !v.trim().is_empty())
                .map(|v| AxisValue::parse(axis, v))
                .collect::<CliResult<Vec<_>>>()?;
            let seeds = match seeds {
                Some(text) => parse_seeds(&text)?,
                None => vec![base.trainer.seed],
            };
            let outcome = run_sweep(&base, &origin, axis, &values, &seeds, jobs, &out)?;
            println!("{:<16} {:>24}", axis.as_str(), "median terminal entropy");
            for (value, h) in outcome.median_terminal_entropy() {
                println!("{:<16} {:>24.6}", value.to_string(), h);
            }
            println!("summary: {}", outcome.summary_path.display());
            let failed = outcome.failed();
            if failed.is_empty() {
                return Ok(());
            }
            for c in &failed {
                eprintln!(
                    "cell {}={} seed {} failed: {}",
                    axis.as_str(),
                    c.value,
                    c.seed,
                    c.outcome.as_ref().unwrap_err()
                );
            }
            Err(CliError::Failed(format!(
                "{} of {} cells failed",
                failed.len(),
                outcome.cells.len()
            )))
        }
        Command::Plot { csv, columns, out } => {
            plot::cmd_plot(&csv, &columns, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
