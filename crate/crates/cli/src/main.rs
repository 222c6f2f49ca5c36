use anyhow::Result;
use approxjoin_cli::{
    cmd_calibrate, cmd_compare, cmd_gen, cmd_run, CalibrateArgs, CompareArgs, RunArgs, EXIT_USAGE,
};
use approxjoin_core::engine::{PlacementPolicy, Strategy};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

/// Approximate multi-way equi-joins on a simulated cluster.
#[derive(Parser)]
#[command(name = "approxjoin", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets from a spec file into CSV partitions.
    Gen {
        /// Flat key=value spec file (keys: n, sizes, key_counts, overlap,
        /// lambda, seed; optional: partitions, payload).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; one subdirectory per dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute a query and print the join report as JSON.
    Run(RunCli),
    /// Run all four strategies and print measured vs predicted volumes.
    Compare(CompareCli),
    /// Profile cross products, fit the latency model, and store it.
    Calibrate {
        /// Cross-product sizes to benchmark.
        #[arg(long, value_delimiter = ',', default_values_t = [100_000u64, 316_000, 1_000_000, 3_160_000, 10_000_000])]
        sizes: Vec<u64>,
        /// Measurement repetitions per size.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Args)]
struct RunCli {
    /// Query text, e.g. "SELECT SUM(R1.V + R2.V) FROM R1, R2 WHERE R1.A = R2.A".
    #[arg(long, conflicts_with = "query_file")]
    query: Option<String>,
    /// File containing the query text.
    #[arg(long)]
    query_file: Option<PathBuf>,
    /// Directory holding one subdirectory of part-*.csv files per dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "approx")]
    strategy: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Bloom filter false-positive target.
    #[arg(long, default_value_t = 0.01)]
    fp: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Placement policy: uniform, colocated, adversarial, or model.
    #[arg(long, default_value = "uniform")]
    placement: String,
    /// Optional path for a TSV dump of every ledger entry.
    #[arg(long)]
    ledger_out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareCli {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// False-positive targets for the filtered strategies.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1f64, 0.01, 0.001])]
    fp_list: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "uniform")]
    placement: String,
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { spec, out } => cmd_gen(&spec, &out),
        Command::Run(args) => {
            let strategy: Strategy = match args.strategy.parse() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(EXIT_USAGE);
                }
            };
            let placement: PlacementPolicy = match args.placement.parse() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(EXIT_USAGE);
                }
            };
            let query_text = match (&args.query, &args.query_file) {
                (Some(q), _) => q.clone(),
                (None, Some(path)) => std::fs::read_to_string(path)?,
                (None, None) => {
                    eprintln!("one of --query or --query-file is required");
                    return Ok(EXIT_USAGE);
                }
            };
            cmd_run(&RunArgs {
                query_text,
                data_dir: args.data,
                strategy,
                workers: args.workers,
                fp: args.fp,
                seed: args.seed,
                placement,
                ledger_out: args.ledger_out,
            })
        }
        Command::Compare(args) => {
            let placement: PlacementPolicy = match args.placement.parse() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(EXIT_USAGE);
                }
            };
            cmd_compare(&CompareArgs {
                data_dir: args.data,
                workers: args.workers,
                fp_list: args.fp_list,
                seed: args.seed,
                placement,
            })
        }
        Command::Calibrate { sizes, repeats } => cmd_calibrate(&CalibrateArgs { sizes, repeats }),
    }
}

fn main() {
    // Die quietly when a downstream pipe closes (e.g. `compare | head`)
    // instead of panicking on EPIPE.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep exit code 1 for usage errors; clap would exit with 2.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            std::process::exit(if is_help { 0 } else { EXIT_USAGE });
        }
    };
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(EXIT_USAGE);
        }
    }
}
