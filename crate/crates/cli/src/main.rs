use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memattn::bench::{self, BenchError, ChunkPolicy, GradCheckConfig, Mode, RunConfig};
use memattn::{ChunkParams, Dtype};

mod sizes;

/// Exact attention with small workspace: checks and sweeps.
#[derive(Parser, Debug)]
#[command(name = "memattn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare every mode with the reference on seeded inputs.
    Check(CheckArgs),
    /// Gradients of the chunked pass vs the analytic reference and finite differences (f64).
    Gradcheck(GradArgs),
    /// Workspace, MAC and timing sweep, one CSV row per (mode, n).
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct Shared {
    /// Sequence lengths: `1024`, `256,1024`, `2^8` or a power-of-two range `2^8..2^12`
    #[arg(long = "n", value_parser = sizes::parse_sizes)]
    sizes: Option<sizes::Sizes>,

    #[arg(long, default_value_t = 1)]
    heads: usize,

    #[arg(long, default_value_t = 64)]
    dim: usize,

    /// f32 or f64
    #[arg(long)]
    dtype: Option<Dtype>,

    #[arg(long, default_value_t = ChunkParams::default().query_chunk_size)]
    query_chunk: usize,

    #[arg(long, default_value_t = ChunkParams::default().key_chunk_size)]
    key_chunk: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Modes to run (comma separated); all by default
    #[arg(long, value_delimiter = ',')]
    mode: Vec<Mode>,

    /// fixed or sqrt_n (key chunk = floor(sqrt(n)))
    #[arg(long, default_value = "fixed")]
    chunk_policy: ChunkPolicy,

    /// Added to every attention score
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    score_offset: f64,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    sweep: SweepArgs,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[command(flatten)]
    shared: Shared,

    /// Finite-difference probes per operand (0 = every entry)
    #[arg(long, default_value_t = GradCheckConfig::default().fd_samples)]
    fd_samples: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    sweep: SweepArgs,

    /// Timing repetitions per cell (median is reported)
    #[arg(long, default_value_t = 5)]
    reps: usize,

    /// Cells predicted to exceed this many workspace scalars are emitted as SKIPPED
    #[arg(long)]
    max_workspace_floats: Option<usize>,

    /// Output file, or `-` for standard output
    #[arg(long, default_value = "-")]
    csv: String,

    /// Budget-matched chunked vs query-chunking rows at n = 2^10, 2^12, 2^14
    #[arg(long)]
    figure3: bool,

    /// Worker threads across cells; a single cell always runs on one thread
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn run_config(shared: &Shared, sweep: &SweepArgs, default_dtype: Dtype) -> RunConfig {
    let defaults = RunConfig::default();
    RunConfig {
        seed: shared.seed,
        modes: if sweep.mode.is_empty() { Mode::ALL.to_vec() } else { sweep.mode.clone() },
        sizes: shared.sizes.clone().map_or(defaults.sizes, |s| s.0),
        heads: shared.heads,
        dim: shared.dim,
        dtype: shared.dtype.unwrap_or(default_dtype),
        query_chunk: shared.query_chunk,
        key_chunk: shared.key_chunk,
        chunk_policy: sweep.chunk_policy,
        score_offset: sweep.score_offset,
        ..defaults
    }
}

fn check(args: CheckArgs) -> Result<ExitCode, BenchError> {
    let config = run_config(&args.shared, &args.sweep, Dtype::F64);
    let report = bench::run_check(&config)?;
    println!("dtype={} tolerance={:e}", report.dtype, report.tolerance);
    for line in &report.lines {
        println!("{line}");
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn gradcheck(args: GradArgs) -> Result<ExitCode, BenchError> {
    let shared = args.shared;
    let config = GradCheckConfig {
        sizes: shared.sizes.map_or_else(|| GradCheckConfig::default().sizes, |s| s.0),
        heads: shared.heads,
        dim: shared.dim,
        seed: shared.seed,
        dtype: shared.dtype.unwrap_or(Dtype::F64),
        params: ChunkParams::new(shared.query_chunk, shared.key_chunk).map_err(|e| BenchError::Usage(e.to_string()))?,
        fd_samples: args.fd_samples,
    };
    let lines = bench::run_gradcheck(&config)?;
    for line in &lines {
        println!("{line}");
    }
    Ok(if lines.iter().all(|l| l.pass()) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench(args: BenchArgs) -> Result<ExitCode, BenchError> {
    let mut config = run_config(&args.shared, &args.sweep, Dtype::F32);
    config.repetitions = args.reps;
    config.max_workspace_floats = args.max_workspace_floats;
    config.threads = args.threads;
    config.figure3 = args.figure3;
    if args.figure3 && args.shared.sizes.is_none() {
        config.sizes = bench::FIGURE3_SIZES.to_vec();
    }
    let records = bench::run_bench(&config)?;
    let written = if args.csv == "-" {
        let stdout = io::stdout();
        let mut out = stdout.lock();
        bench::write_csv(&records, &mut out).and_then(|_| out.flush())
    } else {
        let path = PathBuf::from(&args.csv);
        File::create(&path).and_then(|f| {
            let mut out = BufWriter::new(f);
            bench::write_csv(&records, &mut out)?;
            out.flush()
        })
    };
    if let Err(e) = written {
        eprintln!("error: cannot write CSV to {}: {e}", args.csv);
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Check(a) => check(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e @ BenchError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
