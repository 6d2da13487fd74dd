//! `drgcl`: pre-training, evaluation, ablations and embedding analyses.

mod commands;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Checkpoint, Head, Overrides, Source};

#[derive(Parser)]
#[command(name = "drgcl", version, about = "Dimensional-rationale graph contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "NAME")]
    dataset: Option<String>,
    /// Directory holding `<NAME>/<NAME>_*.txt` corpora [default: data].
    #[arg(long, value_name = "PATH", env = "DRGCL_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

impl From<ConfigArgs> for Overrides {
    fn from(a: ConfigArgs) -> Self {
        Self {
            config: a.config,
            set: a.set,
            seed: a.seed,
            dataset: a.dataset,
            data_dir: a.data_dir,
        }
    }
}

#[derive(Args, Clone, Debug)]
#[group(required = true, multiple = false)]
struct SourceArgs {
    /// Directory of a completed `pretrain` run.
    #[arg(long, value_name = "DIR")]
    run: Option<PathBuf>,
    /// Embedding table CSV (`label,dim_0,...`).
    #[arg(long, value_name = "CSV")]
    embeddings: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CheckpointArg {
    Init,
    Final,
}

impl From<CheckpointArg> for Checkpoint {
    fn from(c: CheckpointArg) -> Self {
        match c {
            CheckpointArg::Init => Checkpoint::Init,
            CheckpointArg::Final => Checkpoint::Final,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Embedding,
    Rr,
    Drin,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Embedding => Head::Embedding,
            HeadArg::Rr => Head::Rr,
            HeadArg::Drin => Head::Drin,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an encoder and rationale weight; writes checkpoints, metrics and a manifest.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory [default: runs/<dataset>-seed<seed>].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Cross-validated linear evaluation of a run's embeddings.
    Eval {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "final")]
        checkpoint: CheckpointArg,
        /// Evaluate raw encoder outputs instead of R-weighted ones.
        #[arg(long)]
        no_apply_r: bool,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Accuracy with random subsets of embedding dimensions preserved.
    Sweep {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, value_enum, default_value = "final")]
        checkpoint: CheckpointArg,
        #[arg(long)]
        no_apply_r: bool,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Correlation matrix between embedding (or projection) dimensions.
    Analyze {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "embedding")]
        head: HeadArg,
        #[arg(long, value_enum, default_value = "final")]
        checkpoint: CheckpointArg,
        #[arg(long)]
        no_apply_r: bool,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Full model and the w/o DR, w/o RR, w/o RR & DR arms, then a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds to run each arm with [default: the config seed].
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn source(args: SourceArgs, checkpoint: CheckpointArg) -> Source {
    match (args.run, args.embeddings) {
        (Some(dir), _) => Source::Run {
            dir,
            checkpoint: checkpoint.into(),
        },
        (None, Some(csv)) => Source::Embeddings(csv),
        (None, None) => unreachable!("clap requires one source"),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain { cfg, out } => {
            commands::cmd_pretrain(&cfg.into(), out)?;
        }
        Command::Eval {
            run,
            cfg,
            checkpoint,
            no_apply_r,
            out,
        } => {
            commands::cmd_eval(&run, &cfg.into(), checkpoint.into(), !no_apply_r, out)?;
        }
        Command::Sweep {
            source: src,
            cfg,
            rates,
            trials,
            checkpoint,
            no_apply_r,
            out,
        } => {
            commands::cmd_sweep(&source(src, checkpoint), &cfg.into(), &rates, trials, !no_apply_r, out)?;
        }
        Command::Analyze {
            source: src,
            cfg,
            head,
            checkpoint,
            no_apply_r,
            out,
        } => {
            commands::cmd_analyze(&source(src, checkpoint), &cfg.into(), head.into(), !no_apply_r, out)?;
        }
        Command::Ablate { cfg, seeds, out } => {
            commands::cmd_ablate(&cfg.into(), &seeds, out)?;
        }
    }
    Ok(())
}
