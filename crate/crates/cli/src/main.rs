use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recipegen::config::{Overrides, RunConfig};
use recipegen::generate::GenerateError;
use recipegen::pipeline::{self, PipelineError};

/// Recipe generation pipeline: ingest, prepare, train, eval, generate.
#[derive(Debug, Parser)]
#[command(name = "recipegen", version)]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true, default_value = "recipegen.conf")]
    config: PathBuf,

    /// Replaces `run.seed` from the config file.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Replaces `run.out_dir` from the config file.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sitemaps and stored pages to a cleaned three-column dataset.
    Ingest,
    /// Clean, filter, augment and split into train/val/test TSV files.
    Prepare,
    /// Train the tokenizer (if absent) and the model.
    Train,
    /// Loss and perplexity on the configured split.
    Eval,
    /// Generate a recipe from ingredient keywords.
    Generate {
        /// Also print the serialized generation.
        #[arg(long)]
        raw: bool,
        #[arg(required = true)]
        keywords: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let overrides = Overrides { seed: cli.seed_override, out_dir: cli.out_dir };
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    match cli.command {
        Command::Ingest => {
            let report = pipeline::cmd_ingest(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::Prepare => {
            let report = pipeline::cmd_prepare(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::Train => {
            let mut progress = |step: usize, loss: f64| eprintln!("step {step}\tloss {loss:.4}");
            let (report, summary) = pipeline::cmd_train(&cfg, &mut progress)?;
            for e in &report.epochs {
                let val = e.val_loss.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!("epoch {}\ttrain loss {:.4}\tval loss {val}", e.epoch, e.train_loss);
            }
            println!("total steps {}\tparameters {}", summary.total_steps, summary.parameters);
        }
        Command::Eval => {
            let report = pipeline::cmd_eval(&cfg)?;
            print!("{}", report.summary());
        }
        Command::Generate { raw, keywords } => match pipeline::cmd_generate(&cfg, &keywords) {
            Ok(g) => {
                print!("{}", g.display);
                if raw {
                    println!("\n{}", g.raw);
                }
            }
            Err(PipelineError::Generate(GenerateError::Malformed { raw: text, reason })) => {
                eprintln!("malformed generation: {reason}");
                println!("{text}");
                return Err(PipelineError::Generate(GenerateError::Malformed { raw: text, reason }));
            }
            Err(e) => return Err(e),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
