use std::path::PathBuf;

use clap::Parser;

use dolma::memnode::{self, MemnodeConfig};

/// Serve a memory region over TCP.
#[derive(Parser)]
#[command(name = "memnode", version)]
struct Args {
    #[arg(long)]
    bind: String,
    #[arg(long)]
    capacity_bytes: u64,
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
    /// Start from a snapshot file instead of an empty region.
    #[arg(long)]
    restore: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let a = Args::parse();
    let cfg = MemnodeConfig {
        bind: a.bind,
        capacity_bytes: a.capacity_bytes,
        snapshot_dir: a.snapshot_dir,
        restore: a.restore,
    };
    memnode::spawn(cfg)?.join();
    Ok(())
}
