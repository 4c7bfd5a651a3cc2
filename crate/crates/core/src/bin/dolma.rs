use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use dolma::bench::{self, Backend, BenchConfig, Format, WorkloadSpec};
use dolma::fabric::latency::PROFILE_ENV;
use dolma::fabric::LatencyModel;
use dolma::memnode::{self, MemnodeConfig};

#[derive(Parser)]
#[command(name = "dolma", version, about = "Object-level disaggregated memory runtime tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload against the all-local oracle.
    Bench(BenchArgs),
    /// Print local and remote latency per transfer size.
    Microbench {
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a memory region over TCP.
    Memnode(MemnodeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Copy, Clone, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendArg {
    Sim,
    Tcp,
}

#[derive(Copy, Clone, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum FormatArg {
    Csv,
    Json,
}

/// Flags of `dolma bench`. The config file has the same keys, with
/// underscores; flags given on the command line win.
#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchArgs {
    /// Preset name or workload JSON file.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    fraction: Option<f64>,
    /// Run every fraction of the evaluation instead of one.
    #[arg(long)]
    #[serde(skip)]
    sweep: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    cluster_size: Option<usize>,
    #[arg(long)]
    dual_buffer: Option<Toggle>,
    #[arg(long)]
    async_write: Option<Toggle>,
    #[arg(long)]
    backend: Option<BackendArg>,
    #[arg(long)]
    memnode: Option<String>,
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<FormatArg>,
    /// JSON file with any of the above keys.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

impl BenchArgs {
    fn merge(self, file: BenchArgs) -> BenchArgs {
        BenchArgs {
            spec: self.spec.or(file.spec),
            fraction: self.fraction.or(file.fraction),
            sweep: self.sweep,
            threads: self.threads.or(file.threads),
            cluster_size: self.cluster_size.or(file.cluster_size),
            dual_buffer: self.dual_buffer.or(file.dual_buffer),
            async_write: self.async_write.or(file.async_write),
            backend: self.backend.or(file.backend),
            memnode: self.memnode.or(file.memnode),
            profile: self.profile.or(file.profile),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
            format: self.format.or(file.format),
            config: None,
        }
    }
}

#[derive(Args, Debug)]
struct MemnodeArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    bind: String,
    #[arg(long, default_value_t = 1 << 30)]
    capacity_bytes: u64,
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
    /// Start from a snapshot file instead of an empty region.
    #[arg(long)]
    restore: Option<PathBuf>,
}

fn profile_path(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(PROFILE_ENV).map(PathBuf::from))
}

fn load_spec(name: &str) -> anyhow::Result<WorkloadSpec> {
    if let Some(s) = bench::preset(name) {
        return Ok(s);
    }
    let p = Path::new(name);
    if !p.exists() {
        bail!("{name:?} is neither a preset ({}) nor a file", bench::PRESET_NAMES.join(", "));
    }
    WorkloadSpec::load(p).with_context(|| format!("loading workload {name}"))
}

fn run_bench(args: BenchArgs) -> anyhow::Result<()> {
    let args = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: BenchArgs = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            args.merge(file)
        }
        None => args,
    };
    let spec = load_spec(args.spec.as_deref().unwrap_or("cg"))?;
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        fraction: args.fraction.unwrap_or(d.fraction),
        threads: args.threads.unwrap_or(d.threads),
        cluster_size: args.cluster_size.unwrap_or(d.cluster_size),
        dual_buffer: args.dual_buffer.map_or(d.dual_buffer, Toggle::on),
        async_write: args.async_write.map_or(d.async_write, Toggle::on),
        seed: args.seed.unwrap_or(d.seed),
        backend: match args.backend {
            Some(BackendArg::Tcp) => Backend::Tcp,
            _ => Backend::Sim,
        },
        memnode: args.memnode,
        profile: profile_path(args.profile),
    };
    let runs = if args.sweep {
        bench::fraction_sweep(&spec, &cfg, &bench::FRACTIONS)?
    } else {
        vec![bench::run_workload(&spec, &cfg)?]
    };
    let format = match args.format {
        Some(FormatArg::Json) => Format::Json,
        _ => Format::Csv,
    };
    bench::emit_report(&runs, format, args.out.as_deref())?;
    Ok(())
}

fn run_microbench(profile: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let model = LatencyModel::load(profile_path(profile).as_deref())?;
    let rows = bench::microbench::run_default(&model)?;
    match out {
        Some(p) => bench::report::write_micro_csv(&rows, std::fs::File::create(p)?)?,
        None => bench::report::write_micro_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_memnode(a: MemnodeArgs) -> anyhow::Result<()> {
    let cfg = MemnodeConfig {
        bind: a.bind,
        capacity_bytes: a.capacity_bytes,
        snapshot_dir: a.snapshot_dir,
        restore: a.restore,
    };
    memnode::spawn(cfg)?.join();
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Bench(a) => run_bench(a),
        Cmd::Microbench { profile, out } => run_microbench(profile, out),
        Cmd::Memnode(a) => run_memnode(a),
    }
}
