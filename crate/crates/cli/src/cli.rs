//! Argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tuneconv_core::analysis::{
    aggregation_csv, bench_overhead, line_grid, overhead_csv, sweep_eval, BenchConfig, SweepConfig, DEFAULT_STEPS,
};
use tuneconv_core::container;
use tuneconv_core::data::Dataset;
use tuneconv_core::train::{Checkpoint, TrainConfig, Trainer};

use crate::infer::{run_inference, InferError, DEFAULT_MAX_PIXELS};
use crate::service::{self, AppState, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tuneconv", version, about = "Train, evaluate and serve tunable-convolution restoration models")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Restore one PNG at a given omega.
    Infer(InferArgs),
    /// Evaluate a checkpoint over an omega grid and noise levels.
    Sweep(SweepArgs),
    /// Time tunable against traditional convolution.
    Bench(BenchArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
    /// Print a checkpoint header as JSON.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated, one value per objective, e.g. `1,0`.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',', required = true)]
    omega: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_PIXELS)]
    max_pixels: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "25")]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    rhos: Vec<f64>,
    /// Omega points separated by `;`, values by `,`, e.g. `1,0;0.5,0.5`.
    /// Defaults to the five-point line for p = 2, else one-hots plus the centre.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also write aggregation-only timings here.
    #[arg(long)]
    aggregation_out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
    kernels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    channels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    ps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "128")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Forward passes allowed in flight at once.
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_PIXELS)]
    max_pixels: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Sweep(a) => sweep(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = TrainConfig::from_file(&a.config)?;
    if a.out_dir.is_some() {
        cfg.out_dir = a.out_dir;
    }
    let out_dir = cfg.out_dir.get_or_insert_with(|| PathBuf::from("run")).clone();
    let mut trainer = Trainer::new(cfg)?;
    let outcome = trainer.run(|_| {})?;
    let last = outcome.log.last().map(|l| l.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations, final loss {last:.5}, checkpoint {}",
        outcome.checkpoint.meta.iteration,
        out_dir.join("final.tcnv").display()
    );
    Ok(())
}

fn infer(a: InferArgs) -> Outcome {
    let ckpt = Checkpoint::from_bytes(&read(&a.ckpt)?)?;
    let png = read(&a.input)?;
    let out = run_inference(&ckpt, &png, &a.omega, a.max_pixels).map_err(|e| match e {
        InferError::OmegaLength { .. } => Failure::Usage(e.to_string()),
        _ => Failure::Runtime(e.to_string()),
    })?;
    if out.clamped {
        log::warn!("omega {:?} clamped to {:?}", a.omega, out.omega);
    }
    write(&a.out, &out.png)
}

fn parse_grid(s: &str, p: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let grid = s
        .split(';')
        .map(|pt| {
            pt.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Usage(format!("bad grid point '{pt}': {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(bad) = grid.iter().find(|pt| pt.len() != p) {
        return Err(Failure::Usage(format!(
            "grid point {bad:?} has {} values but the checkpoint expects p = {p}",
            bad.len()
        )));
    }
    Ok(grid)
}

fn default_grid(p: usize) -> Vec<Vec<f64>> {
    if p == 2 {
        return line_grid(&DEFAULT_STEPS);
    }
    let mut g: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    if p > 1 {
        g.push(vec![1.0 / p as f64; p]);
    }
    g
}

fn sweep(a: SweepArgs) -> Outcome {
    let ckpt = Checkpoint::from_bytes(&read(&a.ckpt)?)?;
    let p = ckpt.model.p();
    let grid = match &a.grid {
        Some(s) => parse_grid(s, p)?,
        None => default_grid(p),
    };
    let data = Dataset::open(&a.data)?;
    let mut cfg = SweepConfig::new(a.sigmas, a.rhos, grid);
    cfg.seed = a.seed;
    let table = sweep_eval(&ckpt.model, &ckpt.meta.objectives, &data.images, &cfg)?;
    write(&a.out, table.to_csv())?;
    print!("{}", table.to_text());
    Ok(())
}

fn bench(a: BenchArgs) -> Outcome {
    let cfg = BenchConfig {
        kernel_sizes: a.kernels,
        channels: a.channels,
        ps: a.ps,
        sizes: a.sizes,
        reps: a.reps,
        warmup: a.warmup,
        ..BenchConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = bench_overhead(&cfg, |r| {
        log::info!(
            "k={} c={} p={} size={}: {:.1}us vs {:.1}us, overhead {:+.2}% (band {:.2}%)",
            r.k,
            r.c,
            r.p,
            r.size,
            r.tunable_us,
            r.traditional_us,
            r.overhead_pct,
            r.noise_band_pct
        )
    })?;
    write(&a.out, overhead_csv(&report.overhead))?;
    if let Some(path) = &a.aggregation_out {
        write(path, aggregation_csv(&report.aggregation))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let raw = read(&a.ckpt)?;
    let cfg = ServiceConfig {
        max_pixels: a.max_pixels,
        workers: a.workers,
        ..ServiceConfig::default()
    };
    let state = AppState::from_bytes(&raw, cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let (addr, server) = service::bind(state, SocketAddr::new(a.host, a.port)).await?;
        // tests and scripts read this line to find an ephemeral port
        println!("listening on http://{addr}");
        server.await
    })?;
    Ok(())
}

fn inspect(a: InspectArgs) -> Outcome {
    let bytes = read(&a.ckpt)?;
    let (mut header, arrays, _) = container::read_header(&bytes)?;
    // the typed decode validates the fields before printing
    tuneconv_core::train::inspect(&bytes)?;
    header.insert("arrays".into(), serde_json::to_value(arrays)?);
    println!("{}", serde_json::to_string_pretty(&header)?);
    Ok(())
}
