use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use doctta::adapt::{Method, Selection};
use doctta::harness::{
    cmd_adapt, cmd_calibrate, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_sweep, cmd_train_source, RunConfig,
};

#[derive(Parser)]
#[command(name = "doctta", version, about = "Test-time adaptation for document models")]
struct Cli {
    /// Run configuration (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and adaptation; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest corpora and write split manifests.
    GenData,
    /// MVLM-pretrain the base model on the unlabeled corpus.
    Pretrain,
    /// Train on labeled source data (source-only baseline).
    TrainSource,
    /// Adapt the source model to the target corpus.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus file (JSON lines); the target split when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Calibration tables for one checkpoint, or a before/after pair.
    Calibrate {
        #[arg(long, required = true, num_args = 1..=2)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Grid search of adaptation hyperparameters on source-val.
    Sweep(AdaptArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Doctta,
    Docuda,
    Tent,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    Entropy,
    Confidence,
    Both,
    None,
}

#[derive(Args)]
struct AdaptArgs {
    /// Adaptation method.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Entropy threshold.
    #[arg(long)]
    gamma: Option<f64>,
    /// Confidence threshold.
    #[arg(long)]
    conf: Option<f64>,
    /// Pseudo-label selection rule.
    #[arg(long, value_enum)]
    select: Option<SelectArg>,
    /// Drop the masked visual-language modeling loss.
    #[arg(long)]
    no_mvlm: bool,
    /// Drop the diversity loss.
    #[arg(long)]
    no_div: bool,
    /// Drop the pseudo-label cross-entropy loss.
    #[arg(long)]
    no_ce: bool,
}

impl AdaptArgs {
    fn apply(&self, config: &mut RunConfig) {
        let a = &mut config.adapt;
        if let Some(m) = self.method {
            a.method = match m {
                MethodArg::Doctta => Method::Doctta,
                MethodArg::Docuda => Method::Docuda,
                MethodArg::Tent => Method::Tent,
            };
        }
        if let Some(g) = self.gamma {
            a.gamma = g;
        }
        if let Some(c) = self.conf {
            a.confidence = c;
        }
        if let Some(s) = self.select {
            a.selection = match s {
                SelectArg::Entropy => Selection::Entropy,
                SelectArg::Confidence => Selection::Confidence,
                SelectArg::Both => Selection::Both,
                SelectArg::None => Selection::None,
            };
        }
        a.losses.mvlm &= !self.no_mvlm;
        a.losses.div &= !self.no_div;
        a.losses.ce &= !self.no_ce;
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out_dir = o.clone();
    }
    let written = match &cli.command {
        Command::GenData => {
            cmd_gen_data(&config)?;
            config.out_dir.join("data")
        }
        Command::Pretrain => cmd_pretrain(&config)?,
        Command::TrainSource => cmd_train_source(&config)?,
        Command::Adapt(args) => {
            args.apply(&mut config);
            config.validate()?;
            cmd_adapt(&config)?
        }
        Command::Eval { checkpoint, corpus } => {
            let (eval, path) = cmd_eval(&config, checkpoint, corpus.as_deref())?;
            println!("{} {:.4} ece {:.4}", eval.metric_name, eval.metric, eval.ece);
            path
        }
        Command::Calibrate { checkpoint, corpus } => cmd_calibrate(&config, checkpoint, corpus.as_deref())?,
        Command::Sweep(args) => {
            args.apply(&mut config);
            config.validate()?;
            cmd_sweep(&config)?
        }
    };
    println!("{}", written.display());
    Ok(())
}
