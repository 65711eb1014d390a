//! `cap`: build banks, train, score and inspect constrained adaptive
//! projection models from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_file_text, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "cap", version, about = "One-class anomaly detection over pretrained feature banks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test instance of the standard suite.
    Synth(Flags),
    /// Validate a feature file (or synthetic train split) into a memory bank.
    BuildBank(Flags),
    /// Train a model on a bank; writes model, trace and diagnostics.
    Train(Flags),
    /// Score a query set against a bank with a trained model.
    Score(Flags),
    /// Score a labeled test set and report adapted and baseline AUROC.
    Eval(Flags),
    /// Retrain across a sweep of k or lambda values.
    Ablate(Flags),
    /// Render anomaly heatmaps for a file of spatial feature maps.
    Heatmap(Flags),
}

/// Every flag maps onto a config key; flags override the config file.
#[derive(Args, Default)]
struct Flags {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// cifar, mvtec or synth
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// l, l-relu or l-relu-l
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    bank: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Query or labeled test set
    #[arg(long)]
    test: Option<String>,
    /// Spatial feature-map file
    #[arg(long)]
    maps: Option<String>,
    /// Feature file to turn into a bank
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Synthetic suite name
    #[arg(long)]
    suite: Option<String>,
    /// k or lambda
    #[arg(long)]
    sweep: Option<String>,
    /// Comma-separated sweep values
    #[arg(long)]
    values: Option<String>,
    /// Heatmap size, HxW or a single side
    #[arg(long)]
    size: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        let mut push = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                pairs.push((key.to_string(), v.clone()));
            }
        };
        push("preset", &self.preset);
        push("k", &self.k);
        push("lambda", &self.lambda);
        push("lr", &self.lr);
        push("batch", &self.batch);
        push("epochs", &self.epochs);
        push("seed", &self.seed);
        push("head", &self.head);
        push("bank", &self.bank);
        push("model", &self.model);
        push("test", &self.test);
        push("maps", &self.maps);
        push("input", &self.input);
        push("out", &self.out);
        push("suite", &self.suite);
        push("sweep", &self.sweep);
        push("values", &self.values);
        push("size", &self.size);
        if self.no_attention {
            pairs.push(("attention".into(), "false".into()));
        }
        pairs
    }

    fn resolve(&self) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::File {
                    path: path.clone(),
                    source: e.into(),
                })?;
                parse_file_text(&text)?
            }
            None => Vec::new(),
        };
        RunConfig::resolve(&file, &self.pairs())
    }
}

fn configure_workers() -> CliResult<()> {
    let Ok(value) = std::env::var("CAP_WORKERS") else {
        return Ok(());
    };
    let workers: usize = value
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::usage(format!("CAP_WORKERS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size worker pool: {e}")))
}

fn run(command: Command) -> CliResult<String> {
    configure_workers()?;
    match command {
        Command::Synth(f) => commands::synth(&f.resolve()?),
        Command::BuildBank(f) => commands::build_bank(&f.resolve()?),
        Command::Train(f) => commands::train_cmd(&f.resolve()?),
        Command::Score(f) => commands::score(&f.resolve()?),
        Command::Eval(f) => commands::eval(&f.resolve()?),
        Command::Ablate(f) => commands::ablate(&f.resolve()?),
        Command::Heatmap(f) => commands::heatmap(&f.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
