//! `ssldetect`: synthetic data, contrastive pretraining, fine-tuning,
//! evaluation, run comparison and gradient verification.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 training aborted,
//! 3 verification failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ssldetect", version, about = "Contrastive backbone pretraining and detector transfer")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for every section.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted `key=value` override; repeatable, last wins.
    #[arg(long = "override", value_name = "K=V", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic unlabeled/train/val dataset.
    Synth,
    /// Contrastive pretraining of backbone and projection head.
    Pretrain,
    /// Fine-tune the detector from scratch or from a pretraining checkpoint.
    Finetune,
    /// Evaluate a detector checkpoint, or prediction files, on a labeled split.
    Eval(commands::EvalArgs),
    /// Side-by-side table of two fine-tuning metrics CSVs.
    Compare(commands::CompareArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(commands::GradcheckArgs),
}

fn init_logging(g: &GlobalArgs) {
    let level = if g.quiet {
        "warn"
    } else if g.verbose {
        "debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn init_threads() {
    if let Some(n) = std::env::var("SSLDETECT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Error chain on one line, skipping causes already spelled out by their
/// parent's message.
fn report(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.global);
    init_threads();
    let g = &cli.global;
    let result = match &cli.command {
        Command::Synth => commands::synth(g),
        Command::Pretrain => commands::pretrain(g),
        Command::Finetune => commands::finetune(g),
        Command::Eval(a) => commands::eval(g, a),
        Command::Compare(a) => commands::compare(g, a),
        Command::Gradcheck(a) => commands::gradcheck(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", report(&f.error));
            ExitCode::from(f.code)
        }
    }
}
