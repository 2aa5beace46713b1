//! `permcollab` command-line tool.

mod commands;

use std::fmt;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "permcollab", version, about = "Disposable-key block-wise image encryption and one-shot dataset sharing")]
pub struct Cli {
    /// Output format for summaries.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a client configuration holding a fresh master secret.
    KeygenConfig(KeygenArgs),
    /// Resize and encrypt a CIFAR-10 dataset into a PCED shard.
    Encrypt(EncryptArgs),
    /// Collect uploads from clients and serve the model artifact.
    Serve(ServeArgs),
    /// Upload encrypted shards to a server in one session.
    Upload(UploadArgs),
    /// Download the model artifact and verify its digest.
    FetchModel(FetchArgs),
    /// Decrypt shards with a client-local key cache and check recovery.
    VerifyRoundtrip(VerifyArgs),
    /// Export images from a shard or a CIFAR-10 file as PNG.
    ExportPng(ExportArgs),
    /// Check the patch/position embedding identities on random instances.
    EmbedCheck(EmbedArgs),
    /// One-shot versus federated communication cost.
    Cost(CostArgs),
}

/// Where the master secret comes from. `--seed` wins over `--config`, which
/// wins over PERMCOLLAB_MASTER_SECRET.
#[derive(Debug, Args)]
pub struct SecretArgs {
    /// Derive the master secret from this seed (reproducible runs).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Client configuration written by keygen-config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub client_id: u32,
    #[arg(long, default_value_t = 16)]
    pub p: usize,
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub nbs: u32,
    #[arg(long, default_value_t = 0)]
    pub nps: u32,
    #[arg(long, default_value_t = 0)]
    pub epoch: u32,
    /// Deterministic secret instead of a random one.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing file.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EncryptArgs {
    /// CIFAR-10 batch file or `cifar-10-batches-bin` directory.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory for the shard and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub split: Option<Split>,
    /// Block size.
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of fixed blocks (N_bs).
    #[arg(long)]
    pub nbs: Option<u32>,
    /// Number of fixed pixel positions per block (N_ps).
    #[arg(long)]
    pub nps: Option<u32>,
    #[arg(long)]
    pub epoch: Option<u32>,
    #[arg(long)]
    pub client_id: Option<u32>,
    /// Side length images are resized to before encryption.
    #[arg(long)]
    pub size: Option<usize>,
    /// Encrypt only the first N images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub first_image_id: u64,
    /// Keep the derived keys in a client-local cache at this path.
    #[arg(long)]
    pub keys: Option<PathBuf>,
    #[command(flatten)]
    pub secret: SecretArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Clients that must finish before the manifest is sealed.
    #[arg(long)]
    pub clients: usize,
    /// Model artifact to serve once the dataset is sealed. A placeholder
    /// blob is served when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1 << 20)]
    pub chunk_size: usize,
    /// Stop this many seconds after sealing (default: run until killed).
    #[arg(long)]
    pub linger_secs: Option<u64>,
}

#[derive(Debug, Args)]
pub struct UploadArgs {
    #[arg(long)]
    pub connect: SocketAddr,
    /// Shard files, or directories searched for `*.pced`.
    #[arg(long, required = true, num_args = 1..)]
    pub shards: Vec<PathBuf>,
    /// Defaults to the client id recorded in the shards.
    #[arg(long)]
    pub client_id: Option<u32>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub retries: u32,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long)]
    pub connect: SocketAddr,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub client_id: u32,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Shard file or directory of shards.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Key cache written by `encrypt --keys`.
    #[arg(long)]
    pub keys: PathBuf,
    /// Original CIFAR-10 data; decrypted images are compared against it.
    #[arg(long)]
    pub plain: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// PCED shard to export from.
    #[arg(long, conflicts_with = "cifar")]
    pub shard: Option<PathBuf>,
    /// CIFAR-10 batch file to export plain images from.
    #[arg(long)]
    pub cifar: Option<PathBuf>,
    /// Resize CIFAR images to this side first.
    #[arg(long, requires = "cifar")]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub clients: u64,
    #[arg(long)]
    pub images: u64,
    #[arg(long, default_value_t = 224 * 224 * 3)]
    pub image_bytes: u64,
    #[arg(long)]
    pub model_bytes: u64,
    #[arg(long)]
    pub rounds: u64,
    #[arg(long, default_value_t = 1.0)]
    pub participation: f64,
}

/// A bad combination of flags; reported before anything is written.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
