use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rhc_cli::{parse_override, parse_stages, run, RunError, RunManifest};
use rhc_core::models::BUILTIN_NAMES;

#[derive(Parser)]
#[command(name = "rhc", version, about = "Receding-horizon control stability pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on a builtin scenario or a scenario TOML file.
    Run {
        #[arg(long)]
        scenario: String,
        /// Comma list of synth, solve, certify, simulate, perf, or all.
        #[arg(long, default_value = "all")]
        stages: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "rhc-out")]
        out: PathBuf,
        /// Scenario override, e.g. N=5, alpha=0.25, U_max=3, grid_points=201.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// List builtin scenarios.
    List,
    /// Print the TOML of a builtin scenario.
    Show { name: String },
}

fn manifest(
    scenario: String,
    stages: &str,
    seed: Option<u64>,
    out: PathBuf,
    set: &[String],
    paths: Option<usize>,
    steps: Option<usize>,
) -> Result<RunManifest, RunError> {
    Ok(RunManifest {
        scenario,
        stages: parse_stages(stages)?,
        out,
        seed,
        overrides: set.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?,
        paths,
        steps,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::List => {
            for n in BUILTIN_NAMES {
                println!("{n}");
            }
            Ok(0)
        }
        Command::Show { name } => rhc_core::models::builtin_config(&name)
            .and_then(|c| c.to_toml_string())
            .map(|t| {
                print!("{t}");
                0
            })
            .map_err(|e| match e {
                rhc_core::Error::NotFound { name, valid } => RunError::UnknownScenario { name, valid },
                other => RunError::stage("show", other),
            }),
        Command::Run { scenario, stages, seed, out, set, paths, steps } => {
            manifest(scenario, &stages, seed, out, &set, paths, steps).and_then(|m| {
                let outcome = run(&m)?;
                for c in &outcome.certificates {
                    let tag = match (c.passed, outcome.expected_failures.contains(&c.name)) {
                        (true, _) => "pass",
                        (false, true) => "fail (expected)",
                        (false, false) => "FAIL",
                    };
                    println!("{:<22} {tag}", c.name);
                }
                println!("outputs written to {}", outcome.out_dir.display());
                Ok(outcome.exit_code)
            })
        }
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
