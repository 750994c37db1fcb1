use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mtlc::cli::{cmd_evaluate, cmd_report, cmd_split, cmd_train, cmd_vocab};
use mtlc::data::{Language, SplitRatios, SENTIMENT};
use mtlc::text::TokenMode;
use mtlc::Result;

#[derive(Parser)]
#[command(
    name = "mtlc",
    version,
    about = "Multi-task comment classification: train, evaluate and compare"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stratified train/validation/test split of a joint TSV.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: SplitRatios,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = SENTIMENT)]
        stratify_task: String,
        #[arg(long, default_value = "kannada")]
        language: Language,
    },
    /// Build a vocabulary file from the texts of a joint TSV.
    Vocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "kannada")]
        language: Language,
        #[arg(long, default_value = "char")]
        mode: TokenMode,
        #[arg(long, default_value_t = 1)]
        min_freq: usize,
        #[arg(long, default_value_t = 20_000)]
        max_size: usize,
    },
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides MTLC_SEED and the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a joint TSV.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        language: Option<Language>,
    },
    /// Compare the reports of one or more training runs.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        /// Directory for comparison.txt and comparison.tsv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split {
            input,
            out_dir,
            ratios,
            seed,
            stratify_task,
            language,
        } => {
            let (split, report) = cmd_split(&input, &out_dir, ratios, seed, &stratify_task, language)?;
            for e in &report.bad_rows {
                eprintln!("{}: skipped {e}", input.display());
            }
            for w in &split.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "train {}  validation {}  test {}",
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
        }
        Command::Vocab {
            input,
            out,
            language,
            mode,
            min_freq,
            max_size,
        } => {
            let v = cmd_vocab(&input, &out, language, mode, min_freq, max_size)?;
            println!("{} tokens written to {}", v.len(), out.display());
        }
        Command::Train { config, seed } => {
            let outcome = cmd_train(&config, seed)?;
            for t in &outcome.report.tasks {
                println!("{}: validation weighted F1 {:.5}", t.task, t.weighted.f1);
            }
            println!("outputs in {}", outcome.out_dir.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            language,
        } => {
            let report = cmd_evaluate(&checkpoint, &data, out.as_deref(), language)?;
            for t in &report.tasks {
                println!(
                    "{}: weighted F1 {:.5}  macro F1 {:.5}  accuracy {:.5}",
                    t.task, t.weighted.f1, t.macro_avg.f1, t.accuracy
                );
            }
        }
        Command::Report { runs, out_dir } => {
            let cmp = cmd_report(&runs)?;
            let text = cmp.to_text();
            print!("{text}");
            if let Some(dir) = out_dir {
                mtlc::io::write_atomic(&dir.join("comparison.txt"), text.as_bytes())?;
                mtlc::io::write_atomic(&dir.join("comparison.tsv"), cmp.to_tsv().as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
