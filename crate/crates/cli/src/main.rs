//! `ctrlgen`: data generation, training, generation, evaluation and sweeps.

mod commands;
mod config;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] ctrlgen::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctrlgen", version, about = "Preference alignment with trainable control tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $CTRLGEN_OUT, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic preference dataset.
    GenData {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        examples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Emit scored single responses instead of pairs.
        #[arg(long)]
        pointwise: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant.
    Train {
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        task: Option<String>,
        /// JSONL training file instead of a synthetic task.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Base checkpoint; pretrained (and cached) when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        #[command(flatten)]
        adapter: AdapterFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Write one response per validation prompt under a control token.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// good, bad, level<k> or none.
        #[arg(long, default_value = "good")]
        adapter: String,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        task: Option<String>,
        /// JSONL file whose validation prompts are used.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dump path (default: <out>/dump.jsonl).
        #[arg(long)]
        dump: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare dump A (candidate) against dump B (baseline).
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Programmatic reward: sort or upper.
        #[arg(long, conflicts_with = "judge")]
        rewarder: Option<String>,
        /// Judge endpoint URL.
        #[arg(long)]
        judge: Option<String>,
        /// Judge template: summary or dialogue.
        #[arg(long, default_value = "summary")]
        template: String,
        /// Also write the report as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train all five variants and compare MEET against each.
    Ablate {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        adapter: AdapterFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Δ against a fixed baseline dump across sampling temperatures.
    SweepTemp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "good")]
        adapter: String,
        #[arg(long)]
        baseline: PathBuf,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',', default_values_t = ctrlgen::eval::DEFAULT_TEMPS.to_vec())]
        temps: Vec<f64>,
        #[arg(long, default_value = "sort")]
        rewarder: String,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Δ against CoH across soft-prompt lengths and LoRA ranks.
    SweepCapacity {
        #[arg(long)]
        task: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,4")]
        ranks: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct AdapterFlags {
    /// handcrafted, soft_prompt or lora.
    #[arg(long = "adapter", id = "adapter_kind")]
    kind: Option<String>,
    /// Soft-prompt length.
    #[arg(long)]
    length: Option<usize>,
    /// LoRA rank.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
