//! `drsls` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use drsls_cli::{
    check_report, cmd_montecarlo, cmd_sample_innovations, cmd_synth, cmd_validate, load, CliError, Overrides, SynthMode,
};

#[derive(Parser)]
#[command(name = "drsls", version, about = "Distributionally robust SLS synthesis and benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nominal,
    Drsls,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one program on the configured model.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "drsls")]
        mode: Mode,
    },
    /// Run the N-SLS vs DR-SLS Monte-Carlo comparison.
    Montecarlo {
        #[command(flatten)]
        common: Common,
    },
    /// Run the property suites on the configured problem.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Write the innovation samples used for synthesis.
    SampleInnovations {
        #[command(flatten)]
        common: Common,
    },
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let loaded = |c: &Common| load(&c.config, &Overrides { seed: c.seed, out: c.out.clone() });
    match cli.command {
        Command::Synth { common, mode } => {
            let loaded = loaded(&common)?;
            let mode = match mode {
                Mode::Nominal => SynthMode::Nominal,
                Mode::Drsls => SynthMode::Drsls,
            };
            let doc = cmd_synth(&loaded, mode)?;
            println!("method      {}", doc.method.label());
            println!("status      {}", doc.status);
            println!("objective   {:.6}", doc.objective);
            println!("epsilon_bar {:.6}", doc.epsilon_bar);
            println!("rho, sigma  {}, {}", opt(doc.rho), opt(doc.sigma));
        }
        Command::Montecarlo { common } => {
            let loaded = loaded(&common)?;
            let body = cmd_montecarlo(&loaded)?;
            println!(
                "{:<8} {:>5} {:>8} {:>9} {:>12} {:>12}",
                "method", "runs", "failed", "violated", "mean_cost", "median_cost"
            );
            for s in &body.summary {
                println!(
                    "{:<8} {:>5} {:>8} {:>9} {:>12} {:>12}",
                    s.method,
                    s.runs,
                    s.failures,
                    s.violated_runs,
                    opt(s.mean_closed_loop_cost),
                    opt(s.median_closed_loop_cost)
                );
            }
            println!("wrote {}", loaded.config.output_dir.display());
        }
        Command::Validate { common } => {
            let loaded = loaded(&common)?;
            let report = cmd_validate(&loaded)?;
            for s in &report.suites {
                let verdict = if s.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {:<22} checks={:<5} worst={:.3e} tol={:.0e}",
                    s.name, s.checks, s.worst, s.tolerance
                );
            }
            for w in &report.warnings {
                println!("warning: {w}");
            }
            check_report(&report)?;
        }
        Command::SampleInnovations { common } => {
            let loaded = loaded(&common)?;
            let n = cmd_sample_innovations(&loaded)?;
            println!("wrote {n} samples to {}", loaded.config.output_dir.join("innovations.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
