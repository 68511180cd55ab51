use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use feddd_core::{
    grid_oracle, save_checkpoint, solve_allocation, AllocInstance, ExperimentConfig, SchemeKind,
};

#[derive(Parser)]
#[command(name = "feddd", about = "Federated learning with differential parameter dropout, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and export rounds.csv / summary.json.
    Run {
        /// Experiment config (JSON); missing fields take the built-in defaults.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured scheme.
        #[arg(long)]
        scheme: Option<SchemeKindArg>,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured round count.
        #[arg(long)]
        rounds: Option<usize>,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one dropout-allocation instance (JSON) exactly.
    Solve {
        #[arg(long)]
        instance: PathBuf,
    },
    /// Brute-force the same instance on a grid, for solver regressions.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        grid_step: f64,
    },
}

#[derive(Clone)]
struct SchemeKindArg(SchemeKind);

impl std::str::FromStr for SchemeKindArg {
    type Err = feddd_core::Error;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.parse().map(SchemeKindArg)
    }
}

fn load_instance(path: &PathBuf) -> Result<AllocInstance> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading instance {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing instance {}", path.display()))
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            scheme,
            seed,
            rounds,
            out,
        } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading config {}", config.display()))?;
            let mut cfg: ExperimentConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", config.display()))?;
            if let Some(SchemeKindArg(s)) = scheme {
                cfg.scheme = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            let output = feddd_core::run(&cfg)?;
            let summary = serde_json::to_value(&output.summary)?;
            feddd_core::metrics::export(&output.records, &summary, &out)?;
            std::fs::write(out.join("partition.json"), &output.partition_manifest)
                .with_context(|| "writing partition manifest")?;
            save_checkpoint(&output.final_global, &out.join("model.bin"))?;
            println!(
                "{}",
                json!({
                    "scheme": cfg.scheme.name(),
                    "rounds": output.records.len(),
                    "final_accuracy": output.summary.final_accuracy,
                    "simulated_time_s": output.summary.total_simulated_time_s,
                    "out": out,
                })
            );
        }
        Command::Solve { instance } => {
            let inst = load_instance(&instance)?;
            let plan = solve_allocation(&inst)?;
            println!("{}", serde_json::to_string(&plan)?);
        }
        Command::Oracle {
            instance,
            grid_step,
        } => {
            let inst = load_instance(&instance)?;
            let plan = grid_oracle(&inst, grid_step)?;
            println!("{}", serde_json::to_string(&plan)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
