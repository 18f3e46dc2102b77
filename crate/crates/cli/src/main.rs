//! `msca`: generate victim traces, convert them, train the attack model,
//! attack, localize leakage and evaluate defenses.

mod cmd;
mod conf;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    NonFinite(String),
}

impl CliError {
    fn context(self, what: &str) -> Self {
        match self {
            Self::Usage(m) => Self::Usage(format!("{what}: {m}")),
            Self::Data(m) => Self::Data(format!("{what}: {m}")),
            Self::NonFinite(m) => Self::NonFinite(format!("{what}: {m}")),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::NonFinite(_) => 3,
        }
    }
}

impl From<manifold_sca::Error> for CliError {
    fn from(e: manifold_sca::Error) -> Self {
        match e {
            manifold_sca::Error::Config(_) => Self::Usage(e.to_string()),
            manifold_sca::Error::NonFinite(_) => Self::NonFinite(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "msca", version, about = "Side-channel trace workbench")]
pub struct Cli {
    /// Run seed; feeds the dataset, init, shuffle, noise and mask streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value file supplying any option not given on the command line.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a victim dataset directory.
    Gen(GenArgs),
    /// Derive a side-channel trace from a memory trace.
    Derive(DeriveArgs),
    /// Fold a side-channel, noisy or Prime+Probe trace into a K x N x N matrix.
    Fold(FoldArgs),
    /// Simulate Prime+Probe on a memory trace.
    Pp(PpArgs),
    /// Train the attack model on a dataset.
    Train(TrainArgs),
    /// Reconstruct the test split and score it against baselines.
    Attack(AttackArgs),
    /// Flag leaky records with spatial attention and map them to functions.
    Localize(LocalizeArgs),
    /// Evaluate blinding or trace noise against a trained attack.
    Defend(DefendArgs),
    /// Apply a noise scheme to a trace file.
    Noise(NoiseArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// lookup, transform or hashcheck [default: lookup]
    #[arg(long)]
    victim: Option<String>,
    /// Number of samples [default: 640]
    #[arg(long)]
    n: Option<usize>,
    /// Training samples [default: 80% of n]
    #[arg(long)]
    train: Option<usize>,
    /// Image family: blobs or gratings [default: blobs]
    #[arg(long)]
    family: Option<String>,
    /// Image height [default: 16]
    #[arg(long)]
    height: Option<usize>,
    /// Image width [default: 16]
    #[arg(long)]
    width: Option<usize>,
    /// Output dataset directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    /// Memory trace file
    input: Option<PathBuf>,
    /// cachebank, cacheline or pagetable, optionally `:<shift|mask>` [default: cacheline]
    #[arg(long)]
    kind: Option<String>,
    /// Output file [default: stdout]
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    input: Option<PathBuf>,
    /// Channels K [default: 1]
    #[arg(long)]
    k: Option<usize>,
    /// Side length N [default: 64]
    #[arg(long)]
    n: Option<usize>,
    /// error or truncate [default: error]
    #[arg(long)]
    overflow: Option<String>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PpArgs {
    input: Option<PathBuf>,
    /// Cache sets S [default: 64]
    #[arg(long)]
    sets: Option<usize>,
    /// Associativity [default: 8]
    #[arg(long)]
    ways: Option<usize>,
    /// Line size in bytes [default: 64]
    #[arg(long)]
    line: Option<u64>,
    /// Victim accesses per epoch [default: 1]
    #[arg(long)]
    epoch: Option<usize>,
    /// Cold-cache repetitions to concatenate [default: 1]
    #[arg(long)]
    repeat: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trace form: a channel kind or pp:<sets>:<ways>:<line>:<epoch>:<repeat> [default: cacheline]
    #[arg(long)]
    form: Option<String>,
    /// Channels K [default: 1]
    #[arg(long)]
    k: Option<usize>,
    /// Side length N [default: 64]
    #[arg(long)]
    n: Option<usize>,
    /// error or truncate [default: error]
    #[arg(long)]
    overflow: Option<String>,
    /// Latent size [default: 32]
    #[arg(long)]
    latent: Option<usize>,
    /// Longest decoded sentence [default: 12]
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Weight of the explicit reconstruction loss [default: 50]
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the realism term [default: 1]
    #[arg(long)]
    w_implicit: Option<f64>,
    /// Weight of the privacy term [default: 1]
    #[arg(long)]
    w_privacy: Option<f64>,
    /// mse or l1 [default: mse]
    #[arg(long)]
    explicit: Option<String>,
    /// Train on traces perturbed by this scheme, e.g. removal-low
    #[arg(long)]
    noise: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written by `train`
    #[arg(long)]
    model: Option<PathBuf>,
    /// all, mse, word_accuracy or privacy_match [default: all]
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Records flagged per trace, or `auto` for 0.1% of the trace [default: auto]
    #[arg(long)]
    topk: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// same-family or other-family [default: same-family]
    #[arg(long)]
    mask: Option<String>,
    /// Weight of the private input [default: 0.1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Mask word for text victims [default: the]
    #[arg(long)]
    mask_word: Option<String>,
    /// Evaluate this noise scheme instead of blinding
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    /// Side-channel, real-valued or Prime+Probe trace
    input: Option<PathBuf>,
    /// Preset (e.g. gaussian-low) or <scheme>:<value>
    #[arg(long)]
    scheme: Option<String>,
    /// Noise stream index [default: 0]
    #[arg(long)]
    index: Option<u64>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("msca: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
