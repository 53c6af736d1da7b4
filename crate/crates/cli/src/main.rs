//! `storetrace`: generate, merge, analyze and inspect traces.

mod commands;
mod serve;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "storetrace",
    version,
    about = "Trace analysis for a data store and its clients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic experiment: one trace per host plus ground truth.
    Gen(GenArgs),
    /// Align host clocks and merge per-host traces into one ordered trace.
    Merge {
        /// Directory holding `<host>.jsonl` files.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Merge on raw timestamps.
        #[arg(long)]
        no_sync: bool,
    },
    /// Build the state model from a merged trace.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        fanout: u32,
        #[arg(long, default_value_t = 64 * 1024)]
        block_size: u32,
    },
    /// Reconstruct request flows and their latency breakdown.
    Flows(Inputs),
    /// Reconstruct the cross-service span tree.
    Spans(Inputs),
    /// Per-command latency and model summary.
    Report(Inputs),
    /// Run the anomaly detectors.
    Detect {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = storetrace::detect::DEFAULT_BUCKET_NS)]
        bucket_ns: i64,
        #[arg(long, default_value_t = storetrace::detect::DEFAULT_AMPLIFICATION_THRESHOLD)]
        threshold: f64,
        /// Also write the bus volume series as CSV (`-in`/`-out` suffixes).
        #[arg(long)]
        series_out: Option<PathBuf>,
    },
    /// Print the intervals of one attribute.
    Query {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        path: String,
        #[arg(long)]
        t0: Option<i64>,
        #[arg(long)]
        t1: Option<i64>,
    },
    /// Serve the JSON API over HTTP.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Args)]
struct GenArgs {
    /// cluster-publish, ssl-double-free, microservices or commands.
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    requests: Option<usize>,
    #[arg(long)]
    payload: Option<i64>,
    #[arg(long)]
    gossip_header: Option<i64>,
    /// Repeatable; replaces the scenario's default faults. `none` clears them.
    #[arg(long = "fault")]
    faults: Vec<String>,
    /// Clock skew as `host=ns`; repeatable.
    #[arg(long = "offset")]
    offsets: Vec<String>,
    /// Emit periodic ping/pong bus traffic.
    #[arg(long)]
    pings: bool,
    /// Fixed command service time.
    #[arg(long, conflicts_with = "service_mean_ns")]
    service_ns: Option<i64>,
    /// Mean of the exponential command service time.
    #[arg(long)]
    service_mean_ns: Option<i64>,
}

#[derive(Args)]
struct Inputs {
    /// Merged trace.
    #[arg(long)]
    trace: PathBuf,
    /// Model file; only `report` reads it.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let res = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Merge { input, out, no_sync } => commands::merge(&input, &out, !no_sync),
        Command::Analyze {
            input,
            out,
            fanout,
            block_size,
        } => commands::analyze(&input, &out, fanout, block_size),
        Command::Flows(i) => commands::flows(&i),
        Command::Spans(i) => commands::spans(&i),
        Command::Report(i) => commands::report(&i),
        Command::Detect {
            inputs,
            bucket_ns,
            threshold,
            series_out,
        } => commands::detect(&inputs, bucket_ns, threshold, series_out.as_deref()),
        Command::Query { model, path, t0, t1 } => commands::query(&model, &path, t0, t1),
        Command::Serve {
            model,
            trace,
            host,
            port,
        } => serve::run(&model, &trace, &host, port),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
