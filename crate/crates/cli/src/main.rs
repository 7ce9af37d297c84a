use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use arfl::experiment::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "arfl", version, about = "Deterministic federated-learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write rounds.csv, weights.csv and summary.json.
    Run(Common),
    /// Run the experiment once per λ multiple and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ/M values; falls back to the config's `lambda_grid`.
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct Common {
    /// Path to the JSON experiment config.
    config: PathBuf,
    /// Overrides the config's `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// `data=N`, `corruption=N` or `training=N`; repeatable.
    #[arg(long = "seed-override", value_name = "NAME=SEED")]
    seed_overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = experiment::load_config(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        for spec in &self.seed_overrides {
            config.apply_seed_override(spec)?;
        }
        if let Some(dir) = &self.output_dir {
            config.output_dir = dir.clone();
        }
        Ok(config)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let config = common.load()?;
            let outcome = experiment::run(&config)?;
            let last = outcome.final_record();
            println!(
                "round {}: test accuracy {}, wrote {}",
                last.round,
                last.test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                config.output_dir.display()
            );
        }
        Command::Sweep { common, lambda_grid } => {
            let config = common.load()?;
            let grid = match lambda_grid.or_else(|| config.lambda_grid.clone()) {
                Some(g) if !g.is_empty() => g,
                _ => bail!("no λ grid: pass --lambda-grid or set `lambda_grid` in the config"),
            };
            for point in experiment::sweep(&config, &grid)? {
                let support = point.final_alpha.iter().filter(|&&a| a > 0.0).count();
                println!(
                    "lambda/M {}: test accuracy {}, {} non-zero weights",
                    point.lambda_multiple,
                    point.final_test_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                    support
                );
            }
            println!("wrote {}", config.output_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
