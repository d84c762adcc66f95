use clap::{Parser, Subcommand};
use scsd_cli::commands;
use scsd_cli::exit_code;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "scsd",
    about = "Query-based semantic segmentation with text-driven feature restyling: \
             dataset generation, training, evaluation, ablations, and plots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic multi-domain dataset to disk.
    Generate {
        /// TOML run config; omit for built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; expects the dataset under `<out>/dataset`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (metrics, checkpoints).
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-class IoU and mean on a split of the checkpoint's dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train`, `eval`, or a domain name.
        #[arg(long, default_value = "eval")]
        split: String,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a visualization for one sample.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// layer-masks | similarity-map | spectrum | embedding-2d
        #[arg(long)]
        kind: String,
        /// Sample index within the eval split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the four-row component sweep over several seeds and emit a
    /// summary table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Base seed; runs use seed, seed+1, ...
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of seeds per row.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

fn run(cli: Cli) -> scsd_core::Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = commands::load_config(config.as_deref())?;
            let manifest = commands::cmd_generate(&cfg, &out)?;
            println!(
                "wrote {} domains x {} samples to {}",
                manifest.domains.len(),
                manifest.n_per_domain,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            out,
            checkpoint,
            seed,
        } => {
            let cfg = commands::load_config(config.as_deref())?;
            let ckpt = commands::cmd_train(&cfg, &out, checkpoint.as_deref(), seed)?;
            println!("checkpoint written to {}", ckpt.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            split,
            out,
        } => {
            commands::cmd_eval(&checkpoint, &split, out.as_deref())?;
            Ok(())
        }
        Command::Viz {
            checkpoint,
            kind,
            sample,
            out,
        } => {
            let files = commands::cmd_viz(&checkpoint, sample, &kind, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Ablate {
            config,
            out,
            seed,
            seeds,
        } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::cmd_ablate(&cfg, &out, seed, seeds)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
