//! Command-line front end: run experiments, aggregate runs, run self-checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dastr::experiment::{load_config, report, run_experiment, ExperimentError, RunSettings};
use dastr::selftest::{run_checks, CHECKS};

#[derive(Parser)]
#[command(name = "dastr", version, about = "Neural committor functions with adaptive flow sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config (or a run manifest).
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set dastr.N_adaptive=2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Suppress per-stage progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Aggregate metrics over run directories as mean ± SD.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Run internal consistency checks; all of them when no name is given.
    Selftest {
        names: Vec<String>,
        /// List the available checks.
        #[arg(long)]
        list: bool,
    },
}

fn fail(e: &ExperimentError) -> ExitCode {
    let mut last = e.to_string();
    eprintln!("error: {last}");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        let msg = s.to_string();
        // messages that embed their source would repeat it
        if !last.ends_with(&msg) {
            eprintln!("  caused by: {msg}");
        }
        last = msg;
        src = s.source();
    }
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, overrides, quiet } => {
            let cfg = match load_config(&config, &overrides) {
                Ok(c) => c,
                Err(e) => return fail(&ExperimentError::Config(e)),
            };
            let progress = |line: &str| eprintln!("{line}");
            let settings = RunSettings {
                build_id: env!("DASTR_BUILD_ID").to_string(),
                progress: (!quiet).then_some(&progress as &(dyn Fn(&str) + Sync)),
            };
            match run_experiment(&cfg, &settings) {
                Ok(m) => {
                    println!(
                        "{} finished in {:.1} s; outputs in {}",
                        m.experiment.as_str(),
                        m.wall_clock_seconds,
                        cfg.resolved_output_dir().display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Report { dirs } => match report(&dirs) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Selftest { names, list } => {
            if list {
                for (name, _) in CHECKS {
                    println!("{name}");
                }
                return ExitCode::SUCCESS;
            }
            if let Some(bad) = names.iter().find(|n| !CHECKS.iter().any(|(c, _)| c == n)) {
                eprintln!("error: unknown check {bad:?}; see `dastr selftest --list`");
                return ExitCode::from(2);
            }
            let results = run_checks(&names);
            for r in &results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<28} {:>7.2}s  {}", r.name, r.seconds, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} passed, {failed} failed", results.len() - failed);
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
