use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{Rng, SeedableRng};
use tempfile::TempDir;

use ifrm::bench::{
    parse_sizes, run_pingpong, run_throughput, write_csv, BenchConfig, BenchMode, Link, Session, Target,
    DEFAULT_RX_LEN, DEMO_MAX_INPUT,
};
use ifrm::packages;
use ifrm::runtime::{CarrierMode, LIB_DIR_ENV};

#[derive(Parser)]
#[command(name = "ifrm-bench", version, about = "ifunc vs. active-message microbenchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the target role: register a receive buffer and answer sessions.
    Serve {
        #[arg(long)]
        listen: String,
        #[arg(long, default_value = "ifunc")]
        mode: BenchMode,
        /// Run inline code units without a local package.
        #[arg(long)]
        trust_inline: bool,
        /// Receive buffer size in bytes.
        #[arg(long, default_value_t = DEFAULT_RX_LEN)]
        rx_len: usize,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
    /// Ping-pong latency sweep.
    Latency(RunArgs),
    /// Batched throughput sweep.
    Throughput(RunArgs),
    /// Send random inputs through the xor codec and check they come back.
    DemoXor {
        /// Target address; runs an in-process target when omitted.
        #[arg(long)]
        connect: Option<String>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = DEMO_MAX_INPUT)]
        max_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone)]
struct Sizes(Vec<usize>);

fn sizes(s: &str) -> Result<Sizes, String> {
    parse_sizes(s).map(Sizes)
}

#[derive(Args)]
struct RunArgs {
    /// Target address; runs an in-process target when omitted.
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, default_value = "ifunc")]
    mode: BenchMode,
    /// `lo..hi` for powers of two, or a comma-separated list.
    #[arg(long, default_value = "1..1048576", value_parser = sizes)]
    sizes: Sizes,
    #[arg(long, default_value_t = 10_000)]
    iters: u32,
    #[arg(long, default_value_t = 100)]
    warmup: u32,
    #[arg(long, default_value_t = 64)]
    batch: u32,
    /// Ship the code unit inline instead of its digest.
    #[arg(long)]
    inline: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

/// The package directory: `IFUNC_LIB_DIR`, or a temporary directory holding
/// the built-in packages.
fn lib_dir() -> Result<(PathBuf, Option<TempDir>)> {
    if let Some(dir) = std::env::var_os(LIB_DIR_ENV) {
        return Ok((dir.into(), None));
    }
    let tmp = TempDir::new()?;
    packages::install(tmp.path())?;
    info!("{LIB_DIR_ENV} unset; using built-in packages in {}", tmp.path().display());
    Ok((tmp.path().to_path_buf(), Some(tmp)))
}

fn link(connect: Option<String>) -> Link {
    connect.map_or(Link::Loopback, Link::Tcp)
}

fn sweep(args: RunArgs, latency: bool) -> Result<()> {
    let (dir, _tmp) = lib_dir()?;
    let mut cfg = BenchConfig::new(args.mode, link(args.connect), dir);
    cfg.sizes = args.sizes.0;
    cfg.iterations = args.iters;
    cfg.warmup = args.warmup;
    cfg.batch = args.batch;
    cfg.timeout = Duration::from_secs(args.timeout_secs);
    if args.inline {
        cfg.carrier = CarrierMode::TrustInlineCode;
    }
    let records = if latency { run_pingpong(&cfg)? } else { run_throughput(&cfg)? };
    match &args.out {
        Some(path) => write_csv(&records, path).with_context(|| format!("writing {}", path.display()))?,
        None => {
            let tmp = TempDir::new()?;
            let path = tmp.path().join("out.csv");
            write_csv(&records, &path)?;
            print!("{}", std::fs::read_to_string(path)?);
        }
    }
    Ok(())
}

fn demo(connect: Option<String>, count: usize, max_len: usize, seed: u64) -> Result<()> {
    if max_len == 0 || max_len > DEMO_MAX_INPUT {
        bail!("--max-len must be in 1..={DEMO_MAX_INPUT}");
    }
    let (dir, _tmp) = lib_dir()?;
    let mut cfg = BenchConfig::new(BenchMode::Ifunc, link(connect), dir);
    cfg.sizes = vec![max_len];
    let mut s = Session::open(&cfg)?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    for i in 0..count {
        let len = rng.gen_range(1..=max_len);
        let input: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let output = s.xor(&input)?;
        if output != input {
            bail!("input {i} ({len} bytes) came back altered");
        }
    }
    s.close()?;
    println!("xor demo: {count} inputs decoded intact");
    Ok(())
}

fn serve(listen: &str, mode: BenchMode, trust_inline: bool, rx_len: usize, timeout: Duration) -> Result<()> {
    let (dir, _tmp) = lib_dir()?;
    let carrier = if trust_inline { CarrierMode::TrustInlineCode } else { CarrierMode::RequireLocalPackage };
    let mut target = Target::new(mode, carrier, &dir, rx_len)?.with_timeout(timeout);
    let server = target.listen(listen)?;
    println!("listening on {}", server.local_addr());
    std::io::stdout().flush()?;
    target.run(false)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.cmd {
        Cmd::Serve { listen, mode, trust_inline, rx_len, timeout_secs } => {
            serve(&listen, mode, trust_inline, rx_len, Duration::from_secs(timeout_secs))
        }
        Cmd::Latency(args) => sweep(args, true),
        Cmd::Throughput(args) => sweep(args, false),
        Cmd::DemoXor { connect, count, max_len, seed } => demo(connect, count, max_len, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ifrm-bench: {e:#}");
            ExitCode::FAILURE
        }
    }
}
