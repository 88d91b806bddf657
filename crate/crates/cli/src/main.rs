use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use qfbsde_cli::pipeline::{EXIT_IO, EXIT_VALIDATION};
use qfbsde_cli::{plot_data_from, run, validate, ExperimentConfig, RunError, RunOptions};

#[derive(Parser)]
#[command(name = "qfbsde", version, about = "Monte Carlo FBSDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts and manifest.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long, env = "QFBSDE_THREADS", default_value_t = 0)]
        threads: usize,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Convert a run's artifacts to long-format plot data.
    Plotdata {
        manifest: PathBuf,
        /// Output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(e: &RunError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.code as u8)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            threads,
        } => match run(&config, &RunOptions { seed, out, threads }) {
            Ok(m) => {
                let summary = serde_json::json!({
                    "scenario": m.scenario,
                    "config_sha256": m.config_sha256,
                    "artifacts": m.artifacts.len(),
                    "warnings": m.warnings,
                });
                println!("{summary}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Validate { config } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&RunError::validation(format!("{e:#}"))),
            };
            let report = validate(&cfg);
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            if report.is_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VALIDATION as u8)
            }
        }
        Command::Plotdata { manifest, out } => {
            let result = plot_data_from(&manifest).and_then(|bytes| match &out {
                Some(p) => {
                    std::fs::write(p, &bytes).with_context(|| format!("writing {}", p.display()))
                }
                None => {
                    use std::io::Write;
                    std::io::stdout()
                        .write_all(&bytes)
                        .context("writing stdout")
                }
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    let code = if e.to_string().contains("missing") {
                        EXIT_VALIDATION
                    } else {
                        EXIT_IO
                    };
                    let err = RunError {
                        code,
                        kind: "manifest",
                        stage: "plotdata".into(),
                        message: format!("{e:#}"),
                    };
                    fail(&err)
                }
            }
        }
    }
}
