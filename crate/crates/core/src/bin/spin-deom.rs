use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spin_deom::runner::{self, RunConfig, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "spin-deom", version, about = "DEOM dynamics of a two-level system in a spin bath")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Set a config field, e.g. `hierarchy.tier=12` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Permit configurations marked expensive.
    #[arg(long)]
    allow_expensive: bool,
    /// Continue from an existing checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit and propagate one configuration.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a named preset; its sweep, if any, is run as well.
    Preset {
        /// One of fig1a..fig1f, fig2, fig3a..fig3c, fig5a..fig5c, dephasing, rabi.
        name: String,
        #[command(flatten)]
        common: Common,
        /// Print the preset as TOML instead of running it.
        #[arg(long)]
        print: bool,
    },
    /// Run every member of the config's sweep and tabulate deviations.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the bath correlation function only.
    FitOnly {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check a configuration without computing anything.
    Validate {
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn prepare(mut config: RunConfig, overrides: &[String], out: Option<&PathBuf>) -> Result<RunConfig, RunError> {
    for o in overrides {
        config.apply_override(o)?;
    }
    if let Some(dir) = out {
        config.output.dir = dir.clone();
    }
    Ok(config)
}

fn options(c: &Common) -> RunOptions {
    RunOptions { allow_expensive: c.allow_expensive, resume: c.resume }
}

fn report_run(outcome: &runner::RunOutcome) {
    let s = &outcome.summary;
    println!(
        "{}: {} records to t = {}, P(t_final) = {:.6}, max active DDOs {}, trace drift {:.1e}",
        s.name, s.n_records, s.final_time, s.final_population, s.max_active, s.max_trace_deviation
    );
    if let Some(e) = s.rabi_max_error {
        println!("isolated-system check: max |P - cos 2Δt| = {e:.3e}");
    }
    println!("artifacts in {}", outcome.dir.display());
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { config, common } => {
            let c = prepare(RunConfig::load(&config)?, &common.overrides, common.out.as_ref())?;
            report_run(&runner::run(&c, &options(&common))?);
        }
        Command::Preset { name, common, print } => {
            let c = prepare(runner::preset(&name)?, &common.overrides, common.out.as_ref())?;
            if print {
                print!("{}", c.to_toml_string());
            } else if c.sweep.is_some() {
                println!("{}", runner::run_sweep(&c, &options(&common))?.table);
            } else {
                report_run(&runner::run(&c, &options(&common))?);
            }
        }
        Command::Sweep { config, common } => {
            let c = prepare(RunConfig::load(&config)?, &common.overrides, common.out.as_ref())?;
            let outcome = runner::run_sweep(&c, &options(&common))?;
            for (label, o) in &outcome.members {
                println!("{label}: {}", o.dir.display());
            }
            println!("{}", outcome.table);
        }
        Command::FitOnly { config, common } => {
            let c = prepare(RunConfig::load(&config)?, &common.overrides, common.out.as_ref())?;
            let fit = runner::fit_only(&c)?;
            println!("{} terms", fit.series.len());
            for (eta, gamma) in fit.series.eta.iter().zip(&fit.series.gamma) {
                println!("  eta = {:+.6e} {:+.6e}i   gamma = {:+.6e} {:+.6e}i", eta.re, eta.im, gamma.re, gamma.im);
            }
            println!(
                "max |error| = {:.3e}, rms = {:.3e} over {} samples",
                fit.errors.max_abs_error, fit.errors.rms_error, fit.errors.n_samples
            );
        }
        Command::Validate { config, overrides } => {
            let c = prepare(RunConfig::load(&config)?, &overrides, None)?;
            c.validate()?;
            println!("{}: ok ({} member runs)", config.display(), runner::expand_sweep(&c).len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
