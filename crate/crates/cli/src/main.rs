use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use casc_cli::commands::{self, Comparison};
use casc_cli::config::{resolve, Overrides};
use casc_core::loss::TrainingMode;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "casc", version, about = "Consensus-aware self-corrective segmentation toolkit")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// supervised or casc
    #[arg(long, global = true)]
    mode: Option<TrainingMode>,
    /// Override one configuration key, e.g. `--set epochs=20`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patch dataset
    Synth {
        /// Replace existing outputs in the data directory
        #[arg(long)]
        force: bool,
    },
    /// Corrupt clean masks with stain-guided false positives and dropped cells
    Inject,
    /// Train a model and write the best checkpoint
    Train,
    /// Score a checkpoint on the train and test splits
    Eval {
        /// Another run's metrics.csv to test against
        #[arg(long, value_name = "METRICS_CSV")]
        compare: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    casc_cli::init_threads()?;
    let cfg = resolve(&Overrides {
        config: cli.config,
        seed: cli.seed,
        mode: cli.mode,
        set: cli.set,
    })?;
    match cli.command {
        Command::Synth { force } => {
            let s = commands::synth(&cfg, force)?;
            println!(
                "wrote {} patches to {} (train {}, val {}, test {})",
                s.patches,
                cfg.data_dir.display(),
                s.split_counts[0],
                s.split_counts[1],
                s.split_counts[2]
            );
        }
        Command::Inject => {
            let s = commands::inject(&cfg)?;
            println!("added {} false positives, removed {} cells", s.added, s.removed);
            for a in &s.accuracy {
                println!("{:>12}  dice {:.4} ± {:.4}  f1 {:.4} ± {:.4}", a.class, a.dice.0, a.dice.1, a.f1.0, a.f1.1);
            }
        }
        Command::Train => {
            let s = commands::train(&cfg)?;
            println!(
                "best epoch {} (val dice {:.4}); checkpoint in {}",
                s.best_epoch,
                s.best_val_dice,
                cfg.run_dir.display()
            );
        }
        Command::Eval { compare } => {
            let s = commands::eval(&cfg, compare.as_deref())?;
            for c in &s.classes {
                println!("{:>5} {:>12}  n {:>3}  dice {:.4} ± {:.4}", c.split, c.class, c.n, c.dice.0, c.dice.1);
            }
            match s.comparison {
                Some(Comparison::Tested(w)) => println!("wilcoxon W={} p={:.4e} ({})", w.statistic, w.p_value, w.bucket),
                Some(Comparison::NoSignal) => println!("wilcoxon: no-signal (all paired differences are zero)"),
                Some(Comparison::TooFewPairs(n)) => println!("wilcoxon: only {n} non-zero pairs"),
                None => {}
            }
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
