//! `sard`: run one scenario, sweep a grid, compare strategy orderings, or
//! re-verify ledger dumps.
//!
//! Exit codes: 0 success, 1 a checked ordering or integrity verification
//! failed, 2 unusable configuration or input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sard_core::engine::{run_with_state, EngineError, SimConfig};
use sard_core::experiments::{
    aggregate, compare_report, emit_csv, ledger_dumps, read_table, render_csv,
    render_csv_with_timing, run_cells, trim_value, Axis, CellResult, ExperimentError, SweepSpec,
    DEFAULT_NODES_VALUES, DEFAULT_REQUEST_FACTORS,
};
use sard_core::ledger::{verify_dump, LedgerError};
use sard_core::selection::Strategy;

#[derive(Parser)]
#[command(name = "sard", version, about = "Zoned edge-cloud service discovery simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single scenario and print its metrics.
    Run(RunArgs),
    /// Run a (value × strategy × seed) grid and emit the aggregated table.
    Sweep(SweepArgs),
    /// Check strategy orderings in a previously emitted table.
    Compare(CompareArgs),
    /// Re-verify ledger dump files (NDJSON or binary).
    Verify(VerifyArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario config, JSON with the SimConfig fields; defaults apply to
    /// anything omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Forward unmatched `svc=`-tagged payloads instead of rejecting them.
    #[arg(long)]
    allow_raw_fallback: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<SimConfig, CliError> {
        let mut config: SimConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
            }
            None => SimConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if self.allow_raw_fallback {
            config.allow_raw_fallback = true;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Strategy override.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Write the run as a one-row CSV table.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include the wall-clock runtime column in the CSV.
    #[arg(long)]
    timing: bool,
    /// Write the mobility trace as CSV.
    #[arg(long)]
    dump_trace: Option<PathBuf>,
    /// Write the final zone plan as JSON.
    #[arg(long)]
    dump_zones: Option<PathBuf>,
    /// Write every final chain as NDJSON into this directory.
    #[arg(long)]
    dump_ledgers: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sweep axis.
    #[arg(long)]
    axis: Axis,
    /// Comma-separated axis values; defaults are 5,10,15,20,25 nodes or
    /// 0.25,0.5,1,2,4 request-load factors.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Comma-separated strategies to cross with the axis.
    #[arg(long, value_delimiter = ',', default_value = "proposed,optimal,random,ccam,sdms")]
    strategies: Vec<Strategy>,
    /// Number of seeds per cell (runs seeds 1..=N).
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Write the aggregated table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include the wall-clock runtime column.
    #[arg(long)]
    timing: bool,
    /// Write every run's chains as NDJSON into this directory.
    #[arg(long)]
    dump_ledgers: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Table emitted by `sard run`/`sard sweep`.
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Dump files to verify; all must pass.
    #[arg(required = true)]
    dumps: Vec<PathBuf>,
}

/// Command failures mapped onto the exit-code contract.
enum CliError {
    /// Exit 1: a checked property did not hold.
    Check(String),
    /// Exit 2: the invocation or its inputs were unusable.
    Config(String),
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut config = args.config.load()?;
    if let Some(strategy) = args.strategy {
        config.strategy = strategy;
    }
    let started = Instant::now();
    let (metrics, state) = run_with_state(config.clone())?;
    let runtime_ms = started.elapsed().as_secs_f64() * 1e3;

    println!(
        "strategy={} seed={} nodes={} users={} steps={}",
        config.strategy, config.seed, config.n_nodes, config.n_users, config.steps
    );
    println!(
        "accepted={} rejected={} acceptance={:.4} unknown_intents={}",
        metrics.accepted, metrics.rejected, metrics.acceptance_rate, metrics.unknown_intents
    );
    println!(
        "total_cost={} mean_response_ms={:.4} p95_ms={:.4}",
        metrics.total_cost, metrics.mean_response_ms, metrics.p95_response_ms
    );
    println!(
        "cache_hit_rate={:.4} bytes_saved={} rezones={}",
        metrics.cache_hit_rate, metrics.bytes_saved, metrics.rezone_count
    );
    if !metrics.rejected_by_reason.is_empty() {
        let reasons: Vec<String> = metrics
            .rejected_by_reason
            .iter()
            .map(|(r, n)| format!("{r:?}={n}"))
            .collect();
        println!("rejections: {}", reasons.join(" "));
    }
    if args.timing {
        println!("runtime_ms={runtime_ms:.1}");
    }

    if let Some(out) = &args.out {
        let cell = CellResult {
            value: config.n_nodes as f64,
            strategy: config.strategy,
            seed: config.seed,
            metrics,
            runtime_ms,
        };
        emit_csv(&aggregate(Axis::Nodes, &[cell]), out, args.timing)?;
    }
    if let Some(path) = &args.dump_trace {
        write_file(path, state.trace_csv())?;
    }
    if let Some(path) = &args.dump_zones {
        let json = serde_json::to_string_pretty(&state.plan).expect("plan serializes");
        write_file(path, json)?;
    }
    if let Some(dir) = &args.dump_ledgers {
        std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
        for (name, text) in ledger_dumps(&state) {
            write_file(&dir.join(format!("{name}.ndjson")), text)?;
        }
    }
    Ok(())
}

fn sweep_spec(args: &SweepArgs) -> Result<SweepSpec, CliError> {
    if args.seeds == 0 {
        return Err(CliError::config("--seeds must be at least 1"));
    }
    let values = if args.values.is_empty() {
        match args.axis {
            Axis::Nodes => DEFAULT_NODES_VALUES.to_vec(),
            Axis::Requests => DEFAULT_REQUEST_FACTORS.to_vec(),
        }
    } else {
        args.values.clone()
    };
    let spec = SweepSpec {
        axis: args.axis,
        values,
        strategies: args.strategies.clone(),
        seeds: (1..=args.seeds).collect(),
        base: args.config.load()?,
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let spec = sweep_spec(args)?;
    let cells = match &args.dump_ledgers {
        None => run_cells(&spec)?,
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
            // Each run also yields its chains; dumps are written after the
            // parallel section, in grid order, so the directory layout is
            // deterministic.
            let ran: Result<Vec<(CellResult, Vec<(String, String)>)>, EngineError> = spec
                .grid()
                .par_iter()
                .map(|&(value, strategy, seed)| {
                    let started = Instant::now();
                    let (metrics, state) = run_with_state(spec.cell_config(value, strategy, seed))?;
                    let prefix = format!("{}{}_{}_seed{}", spec.axis, trim_value(value), strategy, seed);
                    let dumps = ledger_dumps(&state)
                        .into_iter()
                        .map(|(name, text)| (format!("{prefix}.{name}.ndjson"), text))
                        .collect();
                    Ok((
                        CellResult {
                            value,
                            strategy,
                            seed,
                            metrics,
                            runtime_ms: started.elapsed().as_secs_f64() * 1e3,
                        },
                        dumps,
                    ))
                })
                .collect();
            let mut cells = Vec::new();
            for (cell, dumps) in ran.map_err(CliError::from)? {
                for (name, text) in dumps {
                    write_file(&dir.join(name), text)?;
                }
                cells.push(cell);
            }
            cells
        }
    };
    let table = aggregate(spec.axis, &cells);
    let text = if args.timing {
        render_csv_with_timing(&table)
    } else {
        render_csv(&table)
    };
    match &args.out {
        Some(path) => write_file(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let table = read_table(&args.input)?;
    let report = compare_report(&table).map_err(|e| CliError::config(e.to_string()))?;
    print!("{}", report.render());
    if report.all_pass() {
        Ok(())
    } else {
        Err(CliError::Check("strategy orderings violated".into()))
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let mut failed = false;
    for path in &args.dumps {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        match verify_dump(&bytes) {
            Ok(()) => println!("{}: ok", path.display()),
            Err(e @ LedgerError::BadDump(_)) => {
                return Err(CliError::config(format!("{}: {e}", path.display())));
            }
            Err(e) => {
                println!("{}: {e}", path.display());
                failed = true;
            }
        }
    }
    if failed {
        Err(CliError::Check("ledger verification failed".into()))
    } else {
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Check(msg)) => {
            eprintln!("sard: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("sard: {msg}");
            ExitCode::from(2)
        }
    }
}
