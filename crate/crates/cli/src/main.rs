use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use paint_cli::{cmd_adapt, cmd_gradual, cmd_pretrain, cmd_sweep, resolve_scenario, RunConfig, SweepParam};
use paint_core::stream_bench::Method;

#[derive(Parser)]
#[command(name = "paint", version, about = "Continual test-time adaptation with prompt memory")]
struct Cli {
    /// JSON run config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model and write its checkpoint.
    Pretrain,
    /// Adapt over one scenario and write per-batch, per-domain and summary files.
    Adapt {
        #[arg(long)]
        method: Option<Method>,
        /// Preset name (sequential, shuffled, gradual) or a JSON scenario file.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Re-run adaptation for each value of one hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradual severity scenario over several shuffled kind orders.
    Gradual {
        #[arg(long, default_value_t = 10)]
        shuffles: usize,
        #[arg(long, default_value_t = 4)]
        batches_per_severity: usize,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.adaptation.seed = seed;
        config.pretrain.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    let overrides = |config: &mut RunConfig, method: Option<Method>, checkpoint: Option<PathBuf>| {
        if let Some(m) = method {
            config.method = m;
        }
        if let Some(c) = checkpoint {
            config.checkpoint = c;
        }
    };
    match cli.command {
        Command::Pretrain => {
            let s = cmd_pretrain(&config)?;
            println!("clean accuracy {:.4}, checkpoint {}", s.clean_accuracy, s.manifest.display());
        }
        Command::Adapt { method, scenario, checkpoint } => {
            overrides(&mut config, method, checkpoint);
            if let Some(s) = scenario {
                config.scenario = resolve_scenario(&s, config.adaptation.seed)?;
            }
            let s = cmd_adapt(&config)?;
            println!(
                "{}: average accuracy {:.4}, prompts {}, written to {}",
                s.method,
                s.average_accuracy,
                s.final_prompt_count,
                config.out.display()
            );
        }
        Command::Sweep { param, values, method, checkpoint } => {
            overrides(&mut config, method, checkpoint);
            for r in cmd_sweep(&config, param, &values)? {
                println!("{} = {}: accuracy {:.4}, prompts {}", param.name(), r.value, r.average_accuracy, r.prompt_count);
            }
        }
        Command::Gradual { shuffles, batches_per_severity, method, checkpoint } => {
            overrides(&mut config, method, checkpoint);
            let s = cmd_gradual(&config, shuffles, batches_per_severity)?;
            println!("{}: {:.4} ± {:.4} over {} shuffles", s.method, s.mean_accuracy, s.std_accuracy, s.shuffles);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
