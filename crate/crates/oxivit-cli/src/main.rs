//! `oxivit` command line: dataset synthesis, training, evaluation, the
//! lambda/loss ablation, and gradient checking.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::DEFAULT_LAMBDA_GRID;
use config::RunConfig;
use oxivit::loss::LossVariant;

#[derive(Parser)]
#[command(name = "oxivit", version, about = "Joint class/value supervised transformer for oxygen-saturation imaging")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the config's protocol seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// overrides the config's output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic long-tailed dataset and write it to disk
    Synth,
    /// Train on the configured dataset and write a checkpoint + log
    Train {
        /// resume from an existing checkpoint directory
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured dataset
    Eval {
        /// checkpoint directory (manifest.json + weights.bin)
        #[arg(long)]
        checkpoint: PathBuf,
        /// test hook: score ground truth against itself
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Cross-validated sweep over the joint-loss coefficient and variants
    Ablate {
        /// comma-separated lambda grid
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// comma-separated loss variants (bce, bal_bce)
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Verify model gradients against finite differences
    Gradcheck,
}

fn parse_variant(name: &str) -> anyhow::Result<LossVariant> {
    match name.trim() {
        "bce" => Ok(LossVariant::Bce),
        "bal_bce" | "balbce" => Ok(LossVariant::BalBce),
        other => anyhow::bail!("unknown loss variant {other:?} (expected bce or bal_bce)"),
    }
}

fn resolve_config(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.protocol.seed = seed;
    }
    if let Some(out) = &global.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Train { resume } => commands::cmd_train(&cfg, resume.as_deref()),
        Command::Eval { checkpoint, oracle } => commands::cmd_eval(&cfg, &checkpoint, oracle),
        Command::Ablate { lambdas, variants } => {
            let lambdas = lambdas.unwrap_or_else(|| DEFAULT_LAMBDA_GRID.to_vec());
            let variants = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| parse_variant(n))
                    .collect::<anyhow::Result<Vec<_>>>()?,
                None => vec![LossVariant::Bce],
            };
            commands::cmd_ablate(&cfg, &lambdas, &variants)
        }
        Command::Gradcheck => commands::cmd_gradcheck(&cfg),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
