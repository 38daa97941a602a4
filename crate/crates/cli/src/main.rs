mod commands;
mod config;
mod exp;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad flags, bad config, or flags that contradict each other.
#[derive(Debug)]
pub struct UsageError(pub String);

/// A prerequisite artifact is not in the experiment directory.
#[derive(Debug)]
pub struct MissingError(pub String);

/// The experiment directory is locked or an artifact would be overwritten.
#[derive(Debug)]
pub struct ConflictError(pub String);

macro_rules! display_error {
    ($($t:ty),*) => {$(
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl std::error::Error for $t {}
    )*};
}
display_error!(UsageError, MissingError, ConflictError);

#[derive(Parser, Debug)]
#[command(name = "hatlm", version, about = "LM-aware MWER training for HAT models on a synthetic rare-word task")]
pub struct Cli {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment directory (created on first use).
    #[arg(long, global = true, default_value = "exp")]
    pub exp_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Search-side ILM weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Search-side ELM weight.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Loss-side ILM weight.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Loss-side ELM weight.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Weight of the reference log-likelihood term.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Beam width.
    #[arg(long)]
    pub beam: Option<usize>,
    /// N-best size; the search keeps exactly the final beam, so it must
    /// agree with --beam when both are given.
    #[arg(long)]
    pub k: Option<usize>,
    /// Training steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpora and train the external LM.
    GenData,
    /// Maximum-likelihood training of the HAT model.
    TrainMle {
        #[arg(long, default_value = "mle")]
        name: String,
        #[command(flatten)]
        o: Overrides,
    },
    /// MWER fine-tuning; LM-aware when fusion weights are nonzero.
    TrainMwer {
        /// Model to start from.
        #[arg(long, default_value = "mle")]
        init: String,
        /// Defaults to `mwer` for regular MWER and `mwer-lm` otherwise.
        #[arg(long)]
        name: Option<String>,
        /// Use (lambda, gamma) for (mu, nu) as well.
        #[arg(long)]
        tie: bool,
        /// Take (lambda, gamma) from the latest sweep of the init model.
        #[arg(long)]
        from_sweep: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the learnable fusion module against a frozen HAT model.
    TrainLfm {
        #[arg(long, default_value = "mwer")]
        e2e: String,
        #[arg(long, default_value = "lfm")]
        name: String,
        #[command(flatten)]
        o: Overrides,
    },
    /// Beam search over one split, writing N-best lists.
    Decode {
        #[arg(long)]
        model: String,
        #[arg(long)]
        split: String,
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Re-rank decoded N-best lists with scalar weights or an LFM.
    Rescore {
        /// Name of a decode artifact.
        #[arg(long)]
        nbest: String,
        #[arg(long)]
        lfm: Option<String>,
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Grid search of fusion weights on the two dev sets.
    Sweep {
        #[arg(long)]
        model: String,
        /// shallow-fusion or rescoring; defaults to the config.
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Test-set evaluation of one method.
    Eval {
        #[arg(long)]
        model: String,
        /// Rescore LM-free lists with this LFM.
        #[arg(long)]
        lfm: Option<String>,
        /// Rescore LM-free lists with scalar weights instead of fusing.
        #[arg(long)]
        rescore: bool,
        /// Decode without any LM.
        #[arg(long)]
        no_lm: bool,
        /// Row label in the report.
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Method x test-set WER table and fusion-weight series.
    Report,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<MissingError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<hatlm::Error>() {
            return match e {
                hatlm::Error::MissingArtifact(_) => 3,
                hatlm::Error::Numerical(_) | hatlm::Error::Diverged { .. } => 4,
                hatlm::Error::Config(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn category(code: u8) -> &'static str {
    match code {
        2 => "usage",
        3 => "missing artifact",
        4 => "numerical",
        _ => "error",
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("HATLM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("HATLM_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("hatlm: {}: {e:#}", category(code));
            ExitCode::from(code)
        }
    }
}
