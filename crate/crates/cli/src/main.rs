use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedswitch_core::experiment::{
    parse_config, run_experiment, run_sweep, ExperimentConfig, ExperimentSummary,
};
use fedswitch_core::variants::VariantKind;
use fedswitch_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "fedswitch",
    version,
    about = "Federated semi-supervised learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every trial of an experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the variant x Dirichlet-alpha grid.
    Sweep {
        config: PathBuf,
        /// Comma-separated; falls back to the config's [sweep] block.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        variants: Vec<VariantKind>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Parse and validate a config, then print it with all defaults filled in.
    Validate { config: PathBuf },
}

#[derive(Args, Debug)]
struct Overrides {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(self, cfg: &mut ExperimentConfig) {
        if let Some(out) = self.out {
            cfg.output = out;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
    }
}

fn load(path: &Path, overrides: Overrides) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(s: &ExperimentSummary) {
    print!(
        "{} alpha={} trials={} final_accuracy={:.4} +/- {:.4}",
        s.variant,
        s.dirichlet_alpha,
        s.trials.len(),
        s.final_accuracy_mean,
        s.final_accuracy_std
    );
    if let Some(t) = s.final_teacher_accuracy_mean {
        print!(" teacher={t:.4}");
    }
    println!(
        " downlink_bytes={} uplink_bytes={}",
        s.downlink_bytes_mean, s.uplink_bytes_mean
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, overrides)?;
            let summary = run_experiment(&cfg)?;
            print_summary(&summary);
            println!("results written to {}", cfg.output.display());
        }
        Command::Sweep {
            config,
            alphas,
            variants,
            overrides,
        } => {
            let cfg = load(&config, overrides)?;
            let alphas = if alphas.is_empty() {
                cfg.sweep
                    .as_ref()
                    .map(|s| s.alphas.clone())
                    .unwrap_or_default()
            } else {
                alphas
            };
            let variants = if variants.is_empty() {
                cfg.sweep
                    .as_ref()
                    .map(|s| s.variants.clone())
                    .unwrap_or_else(|| vec![cfg.variant.kind])
            } else {
                variants
            };
            if alphas.is_empty() {
                return Err(Error::Config(
                    "sweep needs --alphas or a [sweep] block with alphas".into(),
                ));
            }
            for cell in run_sweep(&cfg, &alphas, &variants)? {
                print_summary(&cell);
            }
            println!("grid written to {}", cfg.output.join("sweep.csv").display());
        }
        Command::Validate { config } => {
            let cfg = load(
                &config,
                Overrides {
                    out: None,
                    trials: None,
                    seed: None,
                },
            )?;
            print!("{}", cfg.to_toml_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
