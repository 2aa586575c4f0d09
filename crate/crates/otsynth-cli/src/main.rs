//! Benchmark driver for the otsynth library: run configured experiments,
//! dump simulation environments, or evaluate a synthetic sample one-off.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use otsynth::{
    export_environment, full_report, load_dataset, make_environment, run_experiment,
    ExperimentConfig, Role,
};

#[derive(Parser)]
#[command(name = "otsynth", version, about = "Cross-site treatment synthesis benchmark")]
struct Cli {
    /// Worker threads for replicate-level parallelism (overrides the config).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Base seed (overrides the config; seeds the simulation or evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config and write per-replicate
    /// artifacts plus one aggregate CSV.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate one environment and dump its four arms plus a manifest.
    Simulate {
        /// Scenario id, 1 through 11.
        #[arg(long)]
        scenario: u32,
        /// Output directory for the CSVs and manifest.
        #[arg(long)]
        out: PathBuf,
        /// Source control size.
        #[arg(long, default_value_t = 500)]
        n0: usize,
        /// Source treatment size.
        #[arg(long, default_value_t = 250)]
        n1: usize,
        /// Target control size.
        #[arg(long, default_value_t = 500)]
        n0_prime: usize,
        /// Withheld target treatment size.
        #[arg(long, default_value_t = 250)]
        n1_prime: usize,
    },
    /// Evaluate a synthetic sample against an oracle sample and print the
    /// report as JSON.
    Eval {
        /// CSV of synthetic observations.
        #[arg(long)]
        synthetic: PathBuf,
        /// CSV of withheld oracle observations.
        #[arg(long)]
        oracle: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let mut experiment = ExperimentConfig::from_toml_path(&config)?;
            if let Some(workers) = cli.workers {
                experiment.workers = workers;
            }
            if let Some(seed) = cli.seed {
                experiment.seed = seed;
            }
            let table = run_experiment(&experiment)?;
            print!("{}", table.to_csv());
            eprintln!(
                "wrote {} rows to {}",
                table.rows.len(),
                experiment.output_dir.join("aggregate.csv").display()
            );
        }
        Command::Simulate { scenario, out, n0, n1, n0_prime, n1_prime } => {
            let config = ExperimentConfig {
                scenarios: vec![scenario],
                n0,
                n1,
                n0_prime,
                n1_prime,
                seed: cli.seed.unwrap_or(0),
                ..ExperimentConfig::default()
            };
            let spec = config.scenario_spec(scenario, 0)?;
            let env = make_environment(&spec)?;
            export_environment(&env, &spec, &out)?;
            eprintln!(
                "wrote z0.csv, z1.csv, z0prime.csv, z1prime_oracle.csv, manifest.json to {}",
                out.display()
            );
        }
        Command::Eval { synthetic, oracle } => {
            let synth = load_dataset(&synthetic, Role::Synthetic)?;
            let oracle_data = load_dataset(&oracle, Role::TargetTreatmentOracle)?;
            let report = full_report(&synth, &oracle_data, cli.seed.unwrap_or(0))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
