use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use dualproto::cli::{cmd_adapt, cmd_eval, cmd_predict, cmd_synth, AdaptOptions};
use dualproto::config::DEFAULT_CONFIG;
use dualproto::trainer::Ablation;
use dualproto::Error;

#[derive(Parser)]
#[command(
    name = "dualproto",
    version,
    about = "Label-free adaptation of prototype classifiers on frozen embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the [synth] section of a config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt on a dataset; writes checkpoint, metrics and summaries to --out.
    Adapt {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Any of no-fusion, no-weighting, no-align (comma separated or repeated).
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<Ablation>,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Predict labels with a checkpoint's textual prototypes.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions CSV against the dataset's labels.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Confusion matrix CSV (defaults next to the predictions).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration with documentation.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let s = cmd_synth(&config, &out, seed)?;
            println!("wrote {}", out.display());
            println!("zero-shot accuracy: {:.4}", s.zero_shot_accuracy);
        }
        Command::Adapt {
            dataset,
            config,
            out,
            seed,
            ablate,
            resume,
            stop_after,
        } => {
            let s = cmd_adapt(&AdaptOptions {
                dataset,
                config,
                out_dir: out.clone(),
                seed,
                ablations: ablate,
                resume,
                stop_after,
            })?;
            println!("wrote {}", out.display());
            if let Some(z) = s.zero_shot_accuracy {
                println!("zero-shot accuracy: {z:.4}");
            }
            if let Some(a) = s.final_accuracy {
                println!("final accuracy: {a:.4}");
            }
        }
        Command::Predict {
            checkpoint,
            dataset,
            out,
        } => {
            let labels = cmd_predict(&checkpoint, &dataset, &out)?;
            println!("wrote {} predictions to {}", labels.len(), out.display());
        }
        Command::Eval {
            predictions,
            dataset,
            out,
        } => {
            let s = cmd_eval(&predictions, &dataset, out.as_deref())?;
            println!("accuracy: {:.4}", s.accuracy);
            println!("confusion matrix: {}", s.confusion_csv.display());
        }
        Command::DefaultConfig => print!("{DEFAULT_CONFIG}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == 2 {
                eprintln!("{}", Cli::command().render_usage());
            }
            ExitCode::from(code as u8)
        }
    }
}
